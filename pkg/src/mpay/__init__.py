"""Multi-factor mobile payments with independent authentication nodes."""

from .codec import BIO, FUND, LOC, AmountMinor, GeoCell, PaymentToken, assemble_payment_token, parse_payment_token
from .errors import MPayError

__all__ = [
    "FUND", "BIO", "LOC", "AmountMinor", "GeoCell", "PaymentToken",
    "assemble_payment_token", "parse_payment_token", "MPayError",
]
__version__ = "0.1.0"
