"""Token constructions and the composite payment-token wire format.

Everything here is pure and thread-safe. Byte layouts:

    timestamp   u64 BE seconds                                  8 bytes
    amount      u64 BE minor units || ISO-4217 code (ASCII)     11 bytes
    geo cell    i32 BE lat_cell || i32 BE lon_cell              8 bytes
    fund token  amount || timestamp || Ed25519 signature        83 bytes

    payment token
        "MPA1" | 0x01 | wallet_id (16) | t (8) | entry_count (1)
        entries: tag (1) | length u16 BE (2) | value, ascending tag order
"""

from __future__ import annotations

import hashlib
import hmac
import math
import re
import struct
from dataclasses import dataclass
from decimal import Decimal

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import GeoRangeError, TokenFormatError

FUND = 0x01
BIO = 0x02
LOC = 0x03
EXTENSION_MIN = 0x80

FACTOR_NAMES = {FUND: "FUND", BIO: "BIO", LOC: "LOC"}

MAGIC = b"MPA1"
VERSION = 0x01
HEADER_LEN = 30
WALLET_ID_LEN = 16
DIGEST_LEN = 32
SECRET_LEN = 32
SIGNATURE_LEN = 64
AMOUNT_LEN = 11
FUND_TOKEN_LEN = AMOUNT_LEN + 8 + SIGNATURE_LEN
MAX_VALUE_LEN = 0xFFFF
MAX_U64 = 2**64 - 1

_CURRENCY_RE = re.compile(r"[A-Z]{3}")


def is_known_tag(tag: int) -> bool:
    return tag in (FUND, BIO, LOC) or EXTENSION_MIN <= tag <= 0xFF


def factor_name(tag: int) -> str:
    return FACTOR_NAMES.get(tag, f"0x{tag:02x}")


def factor_tag(name) -> int:
    """Accept ``"FUND"``/``"BIO"``/``"LOC"``, ``"0x80"``-style strings or ints."""
    if isinstance(name, int):
        tag = name
    else:
        upper = str(name).strip().upper()
        by_name = {v: k for k, v in FACTOR_NAMES.items()}
        if upper in by_name:
            return by_name[upper]
        try:
            tag = int(upper, 0) if upper.startswith("0X") else int(upper)
        except ValueError:
            raise ValueError(f"unknown factor {name!r}") from None
    if not is_known_tag(tag):
        raise ValueError(f"unknown factor tag {tag:#04x}")
    return tag


# -- primitive encodings -----------------------------------------------------

def encode_time(t: int) -> bytes:
    if not 0 <= t <= MAX_U64:
        raise ValueError(f"timestamp out of range: {t}")
    return struct.pack(">Q", t)


def decode_time(data: bytes) -> int:
    if len(data) != 8:
        raise TokenFormatError("BAD_LENGTH", "timestamp must be 8 bytes")
    return struct.unpack(">Q", data)[0]


@dataclass(frozen=True)
class AmountMinor:
    minor_units: int
    currency: str

    def __post_init__(self):
        if not 0 <= self.minor_units <= MAX_U64:
            raise ValueError(f"amount out of range: {self.minor_units}")
        if not isinstance(self.currency, str) or not _CURRENCY_RE.fullmatch(self.currency):
            raise ValueError(f"bad currency code {self.currency!r}")

    def encode(self) -> bytes:
        return struct.pack(">Q", self.minor_units) + self.currency.encode("ascii")

    @classmethod
    def decode(cls, data: bytes) -> "AmountMinor":
        if len(data) != AMOUNT_LEN:
            raise TokenFormatError("BAD_LENGTH", "amount must be 11 bytes")
        units = struct.unpack(">Q", data[:8])[0]
        try:
            currency = data[8:].decode("ascii")
            return cls(units, currency)
        except (UnicodeDecodeError, ValueError) as exc:
            raise TokenFormatError("BAD_CURRENCY", str(exc)) from None


@dataclass(frozen=True)
class GeoCell:
    lat_cell: int
    lon_cell: int

    def __post_init__(self):
        if not -9000 <= self.lat_cell <= 8999:
            raise GeoRangeError(f"lat_cell {self.lat_cell} outside [-9000, 8999]")
        if not -18000 <= self.lon_cell <= 17999:
            raise GeoRangeError(f"lon_cell {self.lon_cell} outside [-18000, 17999]")

    @classmethod
    def from_degrees(cls, lat: float, lon: float) -> "GeoCell":
        # Decimal via repr keeps e.g. 37.77 from flooring to 3776.
        lat_cell = math.floor(Decimal(repr(lat)) * 100)
        lon_cell = math.floor(Decimal(repr(lon)) * 100)
        return cls(int(lat_cell), int(lon_cell))

    def encode(self) -> bytes:
        return struct.pack(">ii", self.lat_cell, self.lon_cell)

    @classmethod
    def decode(cls, data: bytes) -> "GeoCell":
        if len(data) != 8:
            raise TokenFormatError("BAD_LENGTH", "geo cell must be 8 bytes")
        return cls(*struct.unpack(">ii", data))

    def offset(self, dlat: int, dlon: int) -> "GeoCell":
        return GeoCell(self.lat_cell + dlat, self.lon_cell + dlon)

    def chebyshev(self, other: "GeoCell") -> int:
        return max(abs(self.lat_cell - other.lat_cell), abs(self.lon_cell - other.lon_cell))


def _require_len(name: str, value: bytes, n: int):
    if len(value) != n:
        raise ValueError(f"{name} must be {n} bytes, got {len(value)}")


# -- token constructions -----------------------------------------------------

def hmac32(key: bytes, msg: bytes) -> bytes:
    return hmac.new(key, msg, hashlib.sha256).digest()


def ottc_baseline(ot: bytes, t: int) -> bytes:
    """One-time transaction code of the legacy flow: HMAC keyed by the OT over t."""
    return hmac32(ot, encode_time(t))


def derive_factor_key(preshared: bytes, t: int) -> bytes:
    return hmac32(preshared, encode_time(t))


def build_biometric_token(template: bytes, t: int, bps: bytes) -> bytes:
    _require_len("biometric template", template, 32)
    return hmac32(derive_factor_key(bps, t), template)


def build_location_token(cell: GeoCell, t: int, lps: bytes) -> bytes:
    if not isinstance(cell, GeoCell):
        raise TypeError("cell must be a GeoCell")
    return hmac32(derive_factor_key(lps, t), cell.encode())


@dataclass(frozen=True)
class FundToken:
    amount: AmountMinor
    t: int
    signature: bytes

    def signed_bytes(self) -> bytes:
        return self.amount.encode() + encode_time(self.t)

    def encode(self) -> bytes:
        return self.signed_bytes() + self.signature

    @classmethod
    def decode(cls, data: bytes) -> "FundToken":
        if len(data) != FUND_TOKEN_LEN:
            raise TokenFormatError("BAD_LENGTH", f"fund token must be {FUND_TOKEN_LEN} bytes")
        amount = AmountMinor.decode(data[:AMOUNT_LEN])
        t = decode_time(data[AMOUNT_LEN:AMOUNT_LEN + 8])
        return cls(amount, t, bytes(data[AMOUNT_LEN + 8:]))

    def verify(self, public_key: Ed25519PublicKey | bytes) -> bool:
        if isinstance(public_key, (bytes, bytearray)):
            public_key = Ed25519PublicKey.from_public_bytes(bytes(public_key))
        try:
            public_key.verify(self.signature, self.signed_bytes())
        except InvalidSignature:
            return False
        return True


def build_fund_token(amount: AmountMinor, t: int, signing_key: Ed25519PrivateKey) -> FundToken:
    message = amount.encode() + encode_time(t)
    return FundToken(amount, t, signing_key.sign(message))


# -- composite token ---------------------------------------------------------

@dataclass(frozen=True)
class PaymentToken:
    wallet_id: bytes
    t: int
    entries: tuple  # ((tag, value), ...) in ascending tag order

    def entry(self, tag: int) -> bytes | None:
        for entry_tag, value in self.entries:
            if entry_tag == tag:
                return value
        return None

    @property
    def tags(self) -> tuple:
        return tuple(tag for tag, _ in self.entries)

    def encode(self) -> bytes:
        return assemble_payment_token(self.wallet_id, self.t, self.entries)


def _check_entry(tag: int, value: bytes, t: int):
    if tag == FUND:
        if len(value) != FUND_TOKEN_LEN:
            raise TokenFormatError("BAD_LENGTH", f"FUND entry must be {FUND_TOKEN_LEN} bytes")
        if value[AMOUNT_LEN:AMOUNT_LEN + 8] != encode_time(t):
            raise TokenFormatError("TIME_MISMATCH", "FUND timestamp differs from header")
    elif tag in (BIO, LOC):
        if len(value) != DIGEST_LEN:
            raise TokenFormatError("BAD_LENGTH", f"{factor_name(tag)} entry must be 32 bytes")


def assemble_payment_token(wallet_id: bytes, t: int, subtokens) -> bytes:
    if len(wallet_id) != WALLET_ID_LEN:
        raise TokenFormatError("BAD_WALLET_ID", "wallet_id must be 16 bytes")
    entries = sorted(((int(tag), bytes(value)) for tag, value in subtokens), key=lambda e: e[0])
    if len(entries) > 255:
        raise TokenFormatError("TOO_MANY_ENTRIES")
    seen = set()
    for tag, value in entries:
        if not is_known_tag(tag):
            raise TokenFormatError("UNKNOWN_TAG", f"{tag:#04x}")
        if tag in seen:
            raise TokenFormatError("DUPLICATE_TAG", factor_name(tag))
        seen.add(tag)
        if len(value) > MAX_VALUE_LEN:
            raise TokenFormatError("VALUE_TOO_LONG", f"{factor_name(tag)}: {len(value)} bytes")
        _check_entry(tag, value, t)
    out = bytearray(MAGIC)
    out.append(VERSION)
    out += wallet_id
    out += encode_time(t)
    out.append(len(entries))
    for tag, value in entries:
        out.append(tag)
        out += struct.pack(">H", len(value))
        out += value
    return bytes(out)


def parse_payment_token(data: bytes) -> PaymentToken:
    """Strict inverse of :func:`assemble_payment_token`.

    Raises :class:`TokenFormatError` for anything that is not a canonical
    encoding; never indexes past the end of ``data``.
    """
    data = bytes(data)
    if len(data) < HEADER_LEN:
        if data[:4] != MAGIC[:len(data[:4])]:
            raise TokenFormatError("BAD_MAGIC")
        raise TokenFormatError("TRUNCATED", "header")
    if data[:4] != MAGIC:
        raise TokenFormatError("BAD_MAGIC")
    if data[4] != VERSION:
        raise TokenFormatError("BAD_VERSION", str(data[4]))
    wallet_id = data[5:21]
    t = struct.unpack(">Q", data[21:29])[0]
    count = data[29]
    pos = HEADER_LEN
    entries = []
    prev = -1
    for _ in range(count):
        if pos == len(data):
            raise TokenFormatError("COUNT_MISMATCH", f"expected {count} entries, found {len(entries)}")
        if pos + 3 > len(data):
            raise TokenFormatError("TRUNCATED", "entry header")
        tag = data[pos]
        length = struct.unpack(">H", data[pos + 1:pos + 3])[0]
        pos += 3
        if pos + length > len(data):
            raise TokenFormatError("TRUNCATED", f"entry {factor_name(tag)}")
        value = data[pos:pos + length]
        pos += length
        if not is_known_tag(tag):
            raise TokenFormatError("UNKNOWN_TAG", f"{tag:#04x}")
        if tag == prev:
            raise TokenFormatError("DUPLICATE_TAG", factor_name(tag))
        if tag < prev:
            raise TokenFormatError("UNORDERED_TAGS", factor_name(tag))
        _check_entry(tag, value, t)
        prev = tag
        entries.append((tag, value))
    if pos != len(data):
        raise TokenFormatError("TRAILING_BYTES", f"{len(data) - pos} extra bytes")
    return PaymentToken(wallet_id, t, tuple(entries))


def txn_id(token_bytes: bytes) -> bytes:
    return hashlib.sha256(token_bytes).digest()[:16]
