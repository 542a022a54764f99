"""Authentication nodes: fund, biometric, location, and pluggable extensions.

Each node gets the whole payment token, checks only its own entry, and
reports a MACed :class:`AuthResult` to the card network. Checks run in a
fixed order so the reported reason is deterministic:

    structure -> enrollment -> signature/regeneration -> freshness -> replay -> funds
"""

from __future__ import annotations

import hmac
import logging
import os
import struct
from collections import deque
from dataclasses import dataclass, field, replace

from . import codec
from .codec import BIO, FUND, LOC, GeoCell, PaymentToken
from .errors import EnrollmentError, MPayError, TokenFormatError

log = logging.getLogger(__name__)

APPROVE = "APPROVE"
DECLINE = "DECLINE"

REASONS = (
    "OK",
    "BAD_SIGNATURE",
    "STALE",
    "DUPLICATE",
    "INSUFFICIENT_FUNDS",
    "MISMATCH",
    "NOT_ENROLLED",
    "MALFORMED",
)
_REASON_CODE = {name: i for i, name in enumerate(REASONS)}

DEFAULT_WINDOW_S = 60
DEFAULT_TOLERANCE_CELLS = 1


@dataclass(frozen=True)
class AuthResult:
    txn_id: bytes
    factor_tag: int
    verdict: str
    reason: str
    node_id: str
    session: str = ""
    detail: str = ""
    result_mac: bytes = b""

    def __post_init__(self):
        if self.reason not in _REASON_CODE:
            raise ValueError(f"unknown reason {self.reason!r}")
        if self.verdict not in (APPROVE, DECLINE):
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if (self.verdict == APPROVE) != (self.reason == "OK"):
            raise ValueError("verdict APPROVE must pair with reason OK")

    @property
    def approved(self) -> bool:
        return self.verdict == APPROVE

    def canonical_bytes(self) -> bytes:
        node = self.node_id.encode()
        session = self.session.encode()
        return (
            self.txn_id
            + bytes([self.factor_tag, self.verdict == APPROVE, _REASON_CODE[self.reason]])
            + struct.pack(">H", len(node)) + node
            + struct.pack(">H", len(session)) + session
        )

    def signed(self, key: bytes) -> "AuthResult":
        return replace(self, result_mac=codec.hmac32(key, self.canonical_bytes()))

    def mac_valid(self, key: bytes) -> bool:
        return hmac.compare_digest(self.result_mac, codec.hmac32(key, self.canonical_bytes()))

    def to_json(self) -> dict:
        return {
            "txn_id": self.txn_id.hex(),
            "factor": self.factor_tag,
            "verdict": self.verdict,
            "reason": self.reason,
            "node_id": self.node_id,
            "session": self.session,
            "detail": self.detail,
            "mac": self.result_mac.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AuthResult":
        return cls(
            txn_id=bytes.fromhex(obj["txn_id"]),
            factor_tag=int(obj["factor"]),
            verdict=obj["verdict"],
            reason=obj["reason"],
            node_id=str(obj["node_id"]),
            session=str(obj.get("session", "")),
            detail=str(obj.get("detail", "")),
            result_mac=bytes.fromhex(obj.get("mac", "")),
        )


def _result(txn, tag, reason, node_id, detail=""):
    return AuthResult(txn, tag, APPROVE if reason == "OK" else DECLINE, reason, node_id, detail=detail)


# -- node-local stores ------------------------------------------------------

@dataclass
class EnrollmentRecord:
    wallet_id: bytes
    factor: int
    secret: bytes | None = field(default=None, repr=False)
    public_key: bytes | None = None
    account_id: str | None = None
    template: bytes | None = field(default=None, repr=False)
    device_id: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"wallet_id": self.wallet_id.hex(), "factor": self.factor, "extra": self.extra}
        for name in ("secret", "public_key", "template"):
            value = getattr(self, name)
            out[name] = value.hex() if value is not None else None
        out["account_id"] = self.account_id
        out["device_id"] = self.device_id
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "EnrollmentRecord":
        def unhex(v):
            return bytes.fromhex(v) if v is not None else None
        return cls(
            wallet_id=bytes.fromhex(obj["wallet_id"]),
            factor=int(obj["factor"]),
            secret=unhex(obj.get("secret")),
            public_key=unhex(obj.get("public_key")),
            account_id=obj.get("account_id"),
            template=unhex(obj.get("template")),
            device_id=obj.get("device_id"),
            extra=obj.get("extra") or {},
        )


class ReplayCache:
    """Seen ``(wallet_id, t)`` pairs; anything older than the window is evicted first."""

    def __init__(self, window_s: int = DEFAULT_WINDOW_S):
        self.window_s = window_s
        self._seen: dict[tuple[bytes, int], int] = {}

    def evict(self, now: int):
        horizon = now - self.window_s
        self._seen = {k: t for k, t in self._seen.items() if t >= horizon}

    def seen(self, wallet_id: bytes, t: int, now: int) -> bool:
        self.evict(now)
        return (wallet_id, t) in self._seen

    def add(self, wallet_id: bytes, t: int):
        self._seen[(wallet_id, t)] = t

    def __len__(self):
        return len(self._seen)


class AccountLedger:
    def __init__(self, balances: dict | None = None):
        self.balances: dict[str, codec.AmountMinor] = dict(balances or {})
        self.holds: dict[bytes, tuple[str, codec.AmountMinor]] = {}

    def held(self, account_id: str) -> int:
        return sum(a.minor_units for acct, a in self.holds.values() if acct == account_id)

    def available(self, account_id: str) -> int:
        return self.balances[account_id].minor_units - self.held(account_id)

    def can_cover(self, account_id: str, amount: codec.AmountMinor) -> bool:
        balance = self.balances.get(account_id)
        if balance is None or balance.currency != amount.currency:
            return False
        return self.available(account_id) >= amount.minor_units

    def place_hold(self, account_id: str, txn: bytes, amount: codec.AmountMinor):
        if not self.can_cover(account_id, amount):
            raise ValueError("insufficient funds for hold")
        if txn in self.holds:
            raise ValueError("hold already placed for transaction")
        self.holds[txn] = (account_id, amount)

    def capture(self, txn: bytes):
        account_id, amount = self.holds.pop(txn)
        bal = self.balances[account_id]
        self.balances[account_id] = codec.AmountMinor(bal.minor_units - amount.minor_units, bal.currency)

    def void(self, txn: bytes):
        self.holds.pop(txn)

    def to_json(self) -> dict:
        return {
            "balances": {k: [v.minor_units, v.currency] for k, v in sorted(self.balances.items())},
            "holds": {k.hex(): [a, v.minor_units, v.currency] for k, (a, v) in self.holds.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AccountLedger":
        ledger = cls({k: codec.AmountMinor(int(u), c) for k, (u, c) in obj.get("balances", {}).items()})
        for k, (acct, units, cur) in obj.get("holds", {}).items():
            ledger.holds[bytes.fromhex(k)] = (acct, codec.AmountMinor(int(units), cur))
        return ledger


class LocationStore:
    def __init__(self, history_limit: int = 32):
        self.history_limit = history_limit
        self.current: dict[str, tuple[GeoCell, int]] = {}
        self.history: dict[str, deque] = {}

    def ingest(self, device_id: str, cell: GeoCell, t: int):
        latest = self.current.get(device_id)
        if latest is not None:
            if t <= latest[1]:
                raise ValueError(f"non-monotonic fix for {device_id}: {t} <= {latest[1]}")
            self.history.setdefault(device_id, deque(maxlen=self.history_limit)).append(latest)
        self.current[device_id] = (cell, t)

    def fix(self, device_id: str):
        return self.current.get(device_id)

    def to_json(self) -> dict:
        def enc(entry):
            cell, t = entry
            return [cell.lat_cell, cell.lon_cell, t]
        return {
            "current": {d: enc(e) for d, e in sorted(self.current.items())},
            "history": {d: [enc(e) for e in h] for d, h in sorted(self.history.items())},
        }

    @classmethod
    def from_json(cls, obj: dict, history_limit: int = 32) -> "LocationStore":
        store = cls(history_limit)
        for d, (la, lo, t) in obj.get("current", {}).items():
            store.current[d] = (GeoCell(la, lo), t)
        for d, entries in obj.get("history", {}).items():
            store.history[d] = deque(((GeoCell(la, lo), t) for la, lo, t in entries), maxlen=history_limit)
        return store


def ingest_location_fix(device_id: str, fix: tuple[GeoCell, int], store: LocationStore) -> LocationStore:
    store.ingest(device_id, fix[0], fix[1])
    return store


# -- verification -----------------------------------------------------------

def _fresh(t: int, now: int, window_s: int) -> bool:
    return abs(now - t) <= window_s


def _time_and_replay(token, now, window_s, replay):
    """Shared tail of every check chain; returns a failing reason or None."""
    if not _fresh(token.t, now, window_s):
        return "STALE"
    if replay is not None:
        if replay.seen(token.wallet_id, token.t, now):
            return "DUPLICATE"
        replay.add(token.wallet_id, token.t)
    return None


def fund_verify(token: PaymentToken, records: dict, ledger: AccountLedger, now: int, *,
                replay: ReplayCache | None = None, window_s: int = DEFAULT_WINDOW_S,
                txn: bytes | None = None, node_id: str = "fund") -> AuthResult:
    """Signature, then time window, then replay, then funds. Approval places a hold."""
    txn = txn if txn is not None else codec.txn_id(token.encode())
    raw = token.entry(FUND)
    if raw is None:
        return _result(txn, FUND, "MALFORMED", node_id, "no FUND entry")
    try:
        ft = codec.FundToken.decode(raw)
    except TokenFormatError as exc:
        return _result(txn, FUND, "MALFORMED", node_id, exc.code)
    if ft.t != token.t:
        return _result(txn, FUND, "MALFORMED", node_id, "TIME_MISMATCH")
    record = records.get((token.wallet_id, FUND))
    if record is None or record.public_key is None:
        return _result(txn, FUND, "NOT_ENROLLED", node_id)
    if not ft.verify(record.public_key):
        return _result(txn, FUND, "BAD_SIGNATURE", node_id)
    failure = _time_and_replay(token, now, window_s, replay)
    if failure:
        return _result(txn, FUND, failure, node_id)
    if not ledger.can_cover(record.account_id, ft.amount):
        return _result(txn, FUND, "INSUFFICIENT_FUNDS", node_id)
    ledger.place_hold(record.account_id, txn, ft.amount)
    return _result(txn, FUND, "OK", node_id)


def bio_verify(token: PaymentToken, records: dict, now: int, *,
               replay: ReplayCache | None = None, window_s: int = DEFAULT_WINDOW_S,
               txn: bytes | None = None, node_id: str = "bio") -> AuthResult:
    txn = txn if txn is not None else codec.txn_id(token.encode())
    received = token.entry(BIO)
    if received is None or len(received) != codec.DIGEST_LEN:
        return _result(txn, BIO, "MALFORMED", node_id, "BIO entry absent or not 32 bytes")
    record = records.get((token.wallet_id, BIO))
    if record is None:
        return _result(txn, BIO, "NOT_ENROLLED", node_id)
    expected = codec.build_biometric_token(record.template, token.t, record.secret)
    if not hmac.compare_digest(expected, received):
        return _result(txn, BIO, "MISMATCH", node_id)
    failure = _time_and_replay(token, now, window_s, replay)
    return _result(txn, BIO, failure or "OK", node_id)


def neighbourhood(center: GeoCell, radius: int):
    """Valid cells within Chebyshev distance ``radius`` of ``center``, row-major."""
    for dlat in range(-radius, radius + 1):
        for dlon in range(-radius, radius + 1):
            try:
                yield center.offset(dlat, dlon)
            except codec.GeoRangeError:
                continue


def loc_verify(token: PaymentToken, records: dict, store: LocationStore, now: int, *,
               tolerance_cells: int = DEFAULT_TOLERANCE_CELLS, replay: ReplayCache | None = None,
               window_s: int = DEFAULT_WINDOW_S, txn: bytes | None = None,
               node_id: str = "loc") -> AuthResult:
    txn = txn if txn is not None else codec.txn_id(token.encode())
    received = token.entry(LOC)
    if received is None or len(received) != codec.DIGEST_LEN:
        return _result(txn, LOC, "MALFORMED", node_id, "LOC entry absent or not 32 bytes")
    record = records.get((token.wallet_id, LOC))
    if record is None:
        return _result(txn, LOC, "NOT_ENROLLED", node_id)
    fix = store.fix(record.device_id)
    if fix is None:
        return _result(txn, LOC, "MISMATCH", node_id, "NO_FIX")
    key = codec.derive_factor_key(record.secret, token.t)
    matched = any(
        hmac.compare_digest(codec.hmac32(key, cell.encode()), received)
        for cell in neighbourhood(fix[0], tolerance_cells)
    )
    if not matched:
        return _result(txn, LOC, "MISMATCH", node_id)
    failure = _time_and_replay(token, now, window_s, replay)
    return _result(txn, LOC, failure or "OK", node_id)


# -- node objects -----------------------------------------------------------

class SystemRng:
    """OS entropy behind the ``randbytes`` interface used by the seeded PRNG."""

    @staticmethod
    def randbytes(n: int) -> bytes:
        return os.urandom(n)


class AuthNode:
    """State and behaviour common to every authentication node."""

    factor_tag: int = 0
    issues_secret = True

    def __init__(self, node_id: str, mac_key: bytes, *, window_s: int = DEFAULT_WINDOW_S, rng=None):
        self.node_id = node_id
        self.mac_key = mac_key
        self.window_s = window_s
        self.rng = rng or SystemRng()
        self.records: dict[tuple[bytes, int], EnrollmentRecord] = {}
        self.replay = ReplayCache(window_s)

    def _record_for(self, wallet_id: bytes, material: dict) -> EnrollmentRecord:
        return EnrollmentRecord(wallet_id, self.factor_tag, extra=dict(material))

    def issue_preshared(self, wallet_id: bytes, material: dict) -> bytes | None:
        key = (wallet_id, self.factor_tag)
        if key in self.records:
            raise EnrollmentError("DUPLICATE_ENROLLMENT", f"{self.node_id} already holds a record")
        record = self._record_for(wallet_id, material)
        if self.issues_secret:
            record.secret = self.rng.randbytes(codec.SECRET_LEN)
        self.records[key] = record
        log.info("%s enrolled wallet %s", self.node_id, wallet_id.hex())
        return record.secret

    # name used by wallet-side enrollment clients
    def enroll(self, wallet_id: bytes, factor: int, material: dict) -> bytes | None:
        if factor != self.factor_tag:
            raise EnrollmentError("WRONG_FACTOR", f"{self.node_id} handles {codec.factor_name(self.factor_tag)}")
        return self.issue_preshared(wallet_id, material)

    def verify(self, token: PaymentToken, now: int, txn: bytes) -> AuthResult:
        raise NotImplementedError

    def handle_submit(self, token_bytes: bytes, now: int, session: str = "") -> AuthResult:
        """Parse, verify, and sign. Unparseable input yields a MALFORMED decline."""
        txn = codec.txn_id(token_bytes)
        try:
            token = codec.parse_payment_token(token_bytes)
        except TokenFormatError as exc:
            result = _result(txn, self.factor_tag, "MALFORMED", self.node_id, exc.code)
        else:
            result = self.verify(token, now, txn)
        return replace(result, session=session).signed(self.mac_key)

    def state_json(self) -> dict:
        return {"records": [r.to_json() for r in self.records.values()]}

    def load_state(self, obj: dict):
        for raw in obj.get("records", []):
            record = EnrollmentRecord.from_json(raw)
            self.records[(record.wallet_id, record.factor)] = record


class FundNode(AuthNode):
    factor_tag = FUND
    issues_secret = False

    def __init__(self, node_id="fund", mac_key=b"", *, ledger: AccountLedger | None = None, **kw):
        super().__init__(node_id, mac_key, **kw)
        self.ledger = ledger or AccountLedger()

    def _record_for(self, wallet_id, material):
        try:
            public_key = bytes.fromhex(material["public_key"])
            account_id = str(material["account_id"])
        except (KeyError, ValueError, TypeError):
            raise EnrollmentError("BAD_MATERIAL", "FUND needs public_key and account_id") from None
        if len(public_key) != 32:
            raise EnrollmentError("BAD_MATERIAL", "public key must be 32 bytes")
        if account_id not in self.ledger.balances:
            raise EnrollmentError("UNKNOWN_ACCOUNT", account_id)
        return EnrollmentRecord(wallet_id, FUND, public_key=public_key, account_id=account_id)

    def verify(self, token, now, txn):
        return fund_verify(token, self.records, self.ledger, now, replay=self.replay,
                           window_s=self.window_s, txn=txn, node_id=self.node_id)

    def state_json(self):
        return {**super().state_json(), "ledger": self.ledger.to_json()}

    def load_state(self, obj):
        super().load_state(obj)
        if "ledger" in obj:
            self.ledger = AccountLedger.from_json(obj["ledger"])


class BioNode(AuthNode):
    factor_tag = BIO

    def __init__(self, node_id="bio", mac_key=b"", **kw):
        super().__init__(node_id, mac_key, **kw)

    def _record_for(self, wallet_id, material):
        try:
            template = bytes.fromhex(material["template"])
        except (KeyError, ValueError, TypeError):
            raise EnrollmentError("BAD_MATERIAL", "BIO needs a hex template") from None
        if len(template) != 32:
            raise EnrollmentError("BAD_MATERIAL", "template must be 32 bytes")
        return EnrollmentRecord(wallet_id, BIO, template=template)

    def verify(self, token, now, txn):
        return bio_verify(token, self.records, now, replay=self.replay,
                          window_s=self.window_s, txn=txn, node_id=self.node_id)


class LocNode(AuthNode):
    factor_tag = LOC

    def __init__(self, node_id="loc", mac_key=b"", *, tolerance_cells=DEFAULT_TOLERANCE_CELLS,
                 store: LocationStore | None = None, **kw):
        super().__init__(node_id, mac_key, **kw)
        self.tolerance_cells = tolerance_cells
        self.store = store or LocationStore()

    def _record_for(self, wallet_id, material):
        device_id = material.get("device_id") if isinstance(material, dict) else None
        if not device_id:
            raise EnrollmentError("BAD_MATERIAL", "LOC needs a device_id")
        return EnrollmentRecord(wallet_id, LOC, device_id=str(device_id))

    def ingest_fix(self, device_id: str, cell: GeoCell, t: int):
        ingest_location_fix(device_id, (cell, t), self.store)

    def verify(self, token, now, txn):
        return loc_verify(token, self.records, self.store, now, tolerance_cells=self.tolerance_cells,
                          replay=self.replay, window_s=self.window_s, txn=txn, node_id=self.node_id)

    def state_json(self):
        return {**super().state_json(), "locations": self.store.to_json()}

    def load_state(self, obj):
        super().load_state(obj)
        if "locations" in obj:
            self.store = LocationStore.from_json(obj["locations"], self.store.history_limit)


class ExtensionNode(AuthNode):
    """Node for a factor tag >= 0x80 backed by a user-supplied verifier.

    ``verifier(token, node, now)`` returns a reason code from :data:`REASONS`;
    ``"OK"`` approves. Freshness and replay are applied after it, exactly as
    for the built-in nodes.
    """

    def __init__(self, factor_tag: int, verifier, node_id=None, mac_key=b"", **kw):
        super().__init__(node_id or f"ext-{factor_tag:02x}", mac_key, **kw)
        self.factor_tag = factor_tag
        self.verifier = verifier

    def verify(self, token, now, txn):
        if token.entry(self.factor_tag) is None:
            return _result(txn, self.factor_tag, "MALFORMED", self.node_id, "entry absent")
        if self.records and (token.wallet_id, self.factor_tag) not in self.records:
            return _result(txn, self.factor_tag, "NOT_ENROLLED", self.node_id)
        reason = self.verifier(token, self, now)
        if reason != "OK":
            return _result(txn, self.factor_tag, reason, self.node_id)
        failure = _time_and_replay(token, now, self.window_s, self.replay)
        return _result(txn, self.factor_tag, failure or "OK", self.node_id)


def keyed_extension_verifier(token: PaymentToken, node: AuthNode, now: int) -> str:
    """Verifier for extensions built like the biometric token over enrolled ``capture`` bytes."""
    record = node.records.get((token.wallet_id, node.factor_tag))
    if record is None:
        return "NOT_ENROLLED"
    capture = bytes.fromhex(record.extra.get("capture", ""))
    expected = codec.hmac32(codec.derive_factor_key(record.secret, token.t), capture)
    return "OK" if hmac.compare_digest(expected, token.entry(node.factor_tag)) else "MISMATCH"


class FactorCollision(MPayError):
    pass


class FactorRegistry:
    """Which node serves which factor tag. Built-in tags are always taken."""

    def __init__(self):
        self._nodes: dict[int, AuthNode | None] = {FUND: None, BIO: None, LOC: None}

    def __contains__(self, tag):
        return tag in self._nodes

    def extensions(self) -> dict[int, AuthNode]:
        return {t: n for t, n in self._nodes.items() if t >= codec.EXTENSION_MIN}

    def register_extension_verifier(self, factor_tag: int, verifier, **node_kw) -> ExtensionNode:
        if factor_tag in self._nodes:
            raise FactorCollision(f"factor {codec.factor_name(factor_tag)} already registered")
        if not codec.EXTENSION_MIN <= factor_tag <= 0xFF:
            raise ValueError(f"extension tags are 0x80-0xff, got {factor_tag:#04x}")
        node = ExtensionNode(factor_tag, verifier, **node_kw)
        self._nodes[factor_tag] = node
        return node


def register_extension_verifier(registry: FactorRegistry, factor_tag: int, verifier, **node_kw):
    return registry.register_extension_verifier(factor_tag, verifier, **node_kw)
