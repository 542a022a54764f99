"""Digital wallet: card provisioning, factor enrollment, payment tokens."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import codec
from .codec import BIO, FUND, LOC, AmountMinor, GeoCell
from .errors import EnrollmentError, ProvisioningError


def luhn_valid(pan: str) -> bool:
    if not isinstance(pan, str) or not pan.isdigit() or not 16 <= len(pan) <= 19:
        return False
    total = 0
    for i, ch in enumerate(reversed(pan)):
        d = int(ch)
        if i % 2 == 1:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return total % 10 == 0


@dataclass
class WalletState:
    wallet_id: bytes
    signing_seed: bytes = field(repr=False)
    ot: bytes | None = field(default=None, repr=False)
    preshared: dict = field(default_factory=dict, repr=False)  # factor tag -> secret
    registered: set = field(default_factory=set)  # factors the nodes know about
    enrolled_template: bytes | None = field(default=None, repr=False)
    account_id: str | None = None
    device_id: str | None = None
    pan: str | None = field(default=None, repr=False)
    extension_captures: dict = field(default_factory=dict, repr=False)  # tag -> capture bytes

    @classmethod
    def create(cls, rng, **kw) -> "WalletState":
        return cls(wallet_id=rng.randbytes(16), signing_seed=rng.randbytes(32), **kw)

    def to_json(self) -> dict:
        def hx(b):
            return b.hex() if b is not None else None
        return {
            "wallet_id": self.wallet_id.hex(),
            "signing_seed": self.signing_seed.hex(),
            "ot": hx(self.ot),
            "preshared": {str(k): v.hex() for k, v in sorted(self.preshared.items())},
            "registered": sorted(self.registered),
            "enrolled_template": hx(self.enrolled_template),
            "account_id": self.account_id,
            "device_id": self.device_id,
            "pan": self.pan,
            "extension_captures": {str(k): v.hex() for k, v in sorted(self.extension_captures.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WalletState":
        def unhex(v):
            return bytes.fromhex(v) if v is not None else None
        return cls(
            wallet_id=bytes.fromhex(obj["wallet_id"]),
            signing_seed=bytes.fromhex(obj["signing_seed"]),
            ot=unhex(obj.get("ot")),
            preshared={int(k): bytes.fromhex(v) for k, v in obj.get("preshared", {}).items()},
            registered={int(t) for t in obj.get("registered", [])},
            enrolled_template=unhex(obj.get("enrolled_template")),
            account_id=obj.get("account_id"),
            device_id=obj.get("device_id"),
            pan=obj.get("pan"),
            extension_captures={int(k): bytes.fromhex(v) for k, v in obj.get("extension_captures", {}).items()},
        )

    def save(self, path):
        """Write state as JSON, readable by the owner only (it holds every secret)."""
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "WalletState":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class CaptureInputs:
    biometric_reading: bytes
    location_fix: GeoCell | None
    amount: AmountMinor
    t: int
    extensions: dict = field(default_factory=dict)  # tag -> captured bytes

    def __post_init__(self):
        if self.location_fix is not None and not isinstance(self.location_fix, GeoCell):
            raise TypeError("location_fix must be a GeoCell")
        if len(self.biometric_reading) != 32:
            raise ValueError("biometric reading must be 32 bytes")


class Wallet:
    """Wallet behaviour over a :class:`WalletState`.

    ``clock`` returns epoch seconds; ``skew_s`` is added to it so tests can
    push the wallet out of the freshness window.
    """

    def __init__(self, state: WalletState, clock=None):
        self.state = state
        self.clock = clock or (lambda: int(time.time()))
        self.skew_s = 0
        self._signing_key = Ed25519PrivateKey.from_private_bytes(state.signing_seed)

    @property
    def wallet_id(self) -> bytes:
        return self.state.wallet_id

    def now(self) -> int:
        return self.clock() + self.skew_s

    def public_key_bytes(self) -> bytes:
        return self._signing_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    # -- provisioning / enrollment ---------------------------------------

    def check_pan(self, pan: str):
        if not luhn_valid(pan):
            raise ProvisioningError("LUHN", "PAN fails the Luhn check")

    def accept_ot(self, ot: bytes):
        if len(ot) != codec.SECRET_LEN:
            raise ProvisioningError("BAD_OT", "OT must be 32 bytes")
        self.state.ot = ot

    def provision_card(self, pan: str, network) -> bytes:
        """``network`` is anything with ``provision(pan, wallet_id) -> ot``."""
        self.check_pan(pan)
        ot = network.provision(pan, self.wallet_id)
        self.accept_ot(ot)
        self.state.pan = pan
        return ot

    def enrollment_material(self, factor: int) -> dict:
        if factor == FUND:
            if not self.state.account_id:
                raise EnrollmentError("BAD_MATERIAL", "wallet has no account_id")
            return {"public_key": self.public_key_bytes().hex(), "account_id": self.state.account_id}
        if factor == BIO:
            if self.state.enrolled_template is None:
                raise EnrollmentError("BAD_MATERIAL", "wallet has no biometric template")
            return {"template": self.state.enrolled_template.hex()}
        if factor == LOC:
            if not self.state.device_id:
                raise EnrollmentError("BAD_MATERIAL", "wallet has no device_id")
            return {"device_id": self.state.device_id}
        capture = self.state.extension_captures.get(factor)
        return {"capture": capture.hex()} if capture is not None else {}

    def accept_enrollment(self, factor: int, secret: bytes | None):
        if factor == FUND:
            if secret is not None:
                raise EnrollmentError("UNEXPECTED_SECRET", "FUND registration issues no secret")
        elif secret is None or len(secret) != codec.SECRET_LEN:
            raise EnrollmentError("BAD_SECRET", f"{codec.factor_name(factor)} secret must be 32 bytes")
        else:
            self.state.preshared[factor] = secret
        self.state.registered.add(factor)

    def enroll_factor(self, factor: int, node, material: dict | None = None) -> bytes | None:
        """``node`` is anything with ``enroll(wallet_id, factor, material) -> secret | None``."""
        if factor in self.state.registered:
            raise EnrollmentError("DUPLICATE_ENROLLMENT", codec.factor_name(factor))
        if material is None:
            material = self.enrollment_material(factor)
        secret = node.enroll(self.wallet_id, factor, material)
        self.accept_enrollment(factor, secret)
        return secret

    # -- payments --------------------------------------------------------

    def default_factors(self) -> tuple:
        return tuple(sorted(self.state.registered))

    def capture(self, amount: AmountMinor, biometric: bytes | None = None,
                cell: GeoCell | None = None, extensions: dict | None = None) -> CaptureInputs:
        """Snapshot sensors and the wallet clock."""
        if biometric is None:
            biometric = self.state.enrolled_template
        if extensions is None:
            extensions = dict(self.state.extension_captures)
        return CaptureInputs(biometric, cell, amount, self.now(), extensions)

    def initiate_payment(self, inputs: CaptureInputs, factors=None) -> bytes:
        if self.state.ot is None:
            raise ProvisioningError("NOT_PROVISIONED", "wallet has no card")
        factors = self.default_factors() if factors is None else tuple(factors)
        t = inputs.t
        subtokens = []
        for tag in factors:
            if tag not in self.state.registered:
                raise EnrollmentError("NOT_ENROLLED", codec.factor_name(tag))
            if tag == FUND:
                ft = codec.build_fund_token(inputs.amount, t, self._signing_key)
                subtokens.append((FUND, ft.encode()))
            elif tag == BIO:
                subtokens.append((BIO, codec.build_biometric_token(inputs.biometric_reading, t, self.state.preshared[BIO])))
            elif tag == LOC:
                if inputs.location_fix is None:
                    raise codec.GeoRangeError("no location fix captured")
                subtokens.append((LOC, codec.build_location_token(inputs.location_fix, t, self.state.preshared[LOC])))
            else:
                capture = inputs.extensions.get(tag, b"")
                key = codec.derive_factor_key(self.state.preshared[tag], t)
                subtokens.append((tag, codec.hmac32(key, capture)))
        return codec.assemble_payment_token(self.wallet_id, t, subtokens)

    def baseline_ottc(self, t: int | None = None) -> tuple[bytes, int]:
        """Legacy single-factor code keyed by the OT; returns (ottc, t)."""
        if self.state.ot is None:
            raise ProvisioningError("NOT_PROVISIONED", "wallet has no card")
        t = self.now() if t is None else t
        return codec.ottc_baseline(self.state.ot, t), t
