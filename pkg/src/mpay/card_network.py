"""Card network: OT provisioning, legacy OTTC validation, final decisions."""

from __future__ import annotations

import hmac
import json
import logging
from dataclasses import dataclass, field

from . import codec
from .errors import PolicyError, ProvisioningError
from .nodes import APPROVE, DECLINE, AuthResult, SystemRng
from .wallet import luhn_valid

log = logging.getLogger(__name__)


class ProvisionRegistry:
    def __init__(self, issuer_pans=()):
        self.ots: dict[bytes, bytes] = {}
        self.issuer: dict[str, bool] = {pan: True for pan in issuer_pans}
        self.wallet_pans: dict[bytes, str] = {}

    def __len__(self):
        return len(self.ots)

    def to_json(self) -> dict:
        return {
            "ots": {w.hex(): ot.hex() for w, ot in sorted(self.ots.items())},
            "issuer": sorted(p for p, ok in self.issuer.items() if ok),
            "wallet_pans": {w.hex(): p for w, p in sorted(self.wallet_pans.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProvisionRegistry":
        reg = cls(obj.get("issuer", []))
        reg.ots = {bytes.fromhex(w): bytes.fromhex(o) for w, o in obj.get("ots", {}).items()}
        reg.wallet_pans = {bytes.fromhex(w): p for w, p in obj.get("wallet_pans", {}).items()}
        return reg


def provision_token(pan: str, wallet_id: bytes, registry: ProvisionRegistry, rng) -> bytes:
    if wallet_id in registry.ots:
        raise ProvisioningError("DUPLICATE", "wallet already provisioned")
    if not luhn_valid(pan):
        raise ProvisioningError("LUHN", "PAN fails the Luhn check")
    if not registry.issuer.get(pan, False):
        raise ProvisioningError("UNKNOWN_PAN", "issuer does not recognise PAN")
    ot = rng.randbytes(codec.SECRET_LEN)
    registry.ots[wallet_id] = ot
    registry.wallet_pans[wallet_id] = pan
    return ot


def validate_baseline(ottc: bytes, wallet_id: bytes, t: int, registry: ProvisionRegistry,
                      now: int, window_s: int = 60) -> bool:
    ot = registry.ots.get(wallet_id)
    if ot is None:
        raise ProvisioningError("UNKNOWN_WALLET", wallet_id.hex())
    if abs(now - t) > window_s:
        return False
    return hmac.compare_digest(codec.ottc_baseline(ot, t), ottc)


# -- policy -----------------------------------------------------------------

@dataclass(frozen=True)
class DecisionPolicy:
    required: frozenset = frozenset({codec.FUND, codec.BIO, codec.LOC})
    optional: frozenset = frozenset()
    optional_quorum: int = 0
    deadline_ms: int = 500

    def __post_init__(self):
        object.__setattr__(self, "required", frozenset(self.required))
        object.__setattr__(self, "optional", frozenset(self.optional))
        if self.required & self.optional:
            raise PolicyError("a factor cannot be both required and optional")
        if not 0 <= self.optional_quorum <= len(self.optional):
            raise PolicyError("optional_quorum must be between 0 and the number of optional factors")
        if self.deadline_ms <= 0:
            raise PolicyError("deadline_ms must be positive")

    @property
    def factors(self) -> frozenset:
        return self.required | self.optional

    @classmethod
    def from_json(cls, obj) -> "DecisionPolicy":
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        try:
            return cls(
                required=frozenset(codec.factor_tag(f) for f in obj.get("required", [])),
                optional=frozenset(codec.factor_tag(f) for f in obj.get("optional", [])),
                optional_quorum=int(obj.get("optional_quorum", 0)),
                deadline_ms=int(obj.get("deadline_ms", 500)),
            )
        except (TypeError, ValueError, AttributeError) as exc:
            if isinstance(exc, PolicyError):
                raise
            raise PolicyError(f"bad policy document: {exc}") from None

    def to_json(self) -> dict:
        return {
            "required": [codec.factor_name(t) for t in sorted(self.required)],
            "optional": [codec.factor_name(t) for t in sorted(self.optional)],
            "optional_quorum": self.optional_quorum,
            "deadline_ms": self.deadline_ms,
        }


@dataclass(frozen=True)
class Decision:
    txn_id: bytes
    verdict: str
    contributing: tuple = ()  # ((tag, verdict, reason), ...)
    decline_reason: str | None = None  # FACTOR_DECLINED | TIMEOUT | QUORUM_SHORTFALL
    decline_factor: int | None = None
    session: str = ""

    @property
    def summary(self) -> str:
        """One-token reason such as ``LOC:MISMATCH``; empty on approval."""
        if self.verdict == APPROVE:
            return ""
        if self.decline_reason == "FACTOR_DECLINED":
            reason = next(r for tag, _, r in self.contributing if tag == self.decline_factor)
            return f"{codec.factor_name(self.decline_factor)}:{reason}"
        return self.decline_reason or "DECLINED"

    def to_json(self) -> dict:
        return {
            "txn_id": self.txn_id.hex(),
            "session": self.session,
            "verdict": self.verdict,
            "contributing": [[codec.factor_name(t), v, r] for t, v, r in self.contributing],
            "decline_reason": self.decline_reason,
            "decline_factor": codec.factor_name(self.decline_factor) if self.decline_factor is not None else None,
            "summary": self.summary,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Decision":
        factor = obj.get("decline_factor")
        return cls(
            txn_id=bytes.fromhex(obj["txn_id"]),
            verdict=obj["verdict"],
            contributing=tuple((codec.factor_tag(f), v, r) for f, v, r in obj.get("contributing", [])),
            decline_reason=obj.get("decline_reason"),
            decline_factor=codec.factor_tag(factor) if factor is not None else None,
            session=obj.get("session", ""),
        )


@dataclass
class PendingTxn:
    txn_id: bytes
    session: str
    registered_at_ms: int | None = None
    token_factors: frozenset | None = None
    results: dict = field(default_factory=dict)  # (node_id, tag) -> (AuthResult, received_at_ms)
    decision: Decision | None = None

    def first_by_factor(self, before_ms: int | None = None) -> dict:
        out = {}
        for (_, tag), (result, at) in self.results.items():
            if before_ms is not None and at > before_ms:
                continue
            out.setdefault(tag, result)
        return out


class PendingTable:
    def __init__(self):
        self.txns: dict[tuple[bytes, str], PendingTxn] = {}
        self.forged = 0
        self.ignored_duplicates = 0

    def entry(self, txn_id: bytes, session: str = "") -> PendingTxn:
        key = (txn_id, session)
        if key not in self.txns:
            self.txns[key] = PendingTxn(txn_id, session)
        return self.txns[key]

    def get(self, txn_id: bytes, session: str = "") -> PendingTxn | None:
        return self.txns.get((txn_id, session))

    def register(self, txn_id: bytes, session: str, now_ms: int, token_factors=None) -> bool:
        """Start the deadline clock. Returns False for a repeated registration."""
        pending = self.entry(txn_id, session)
        if pending.registered_at_ms is not None:
            return False
        pending.registered_at_ms = now_ms
        pending.token_factors = frozenset(token_factors) if token_factors is not None else None
        return True


def collect_result(result: AuthResult, table: PendingTable, node_keys: dict, now_ms: int = 0) -> bool:
    """Record ``result`` if its MAC checks out. First write per (node, factor) wins."""
    key = node_keys.get(result.node_id)
    if key is None or not result.mac_valid(key):
        table.forged += 1
        log.warning("discarded result with bad MAC from %r", result.node_id)
        return False
    pending = table.entry(result.txn_id, result.session)
    slot = (result.node_id, result.factor_tag)
    if slot in pending.results:
        table.ignored_duplicates += 1
        return False
    pending.results[slot] = (result, now_ms)
    return True


def evaluate(policy: DecisionPolicy, verdicts: dict, deadline_passed: bool, token_factors=None):
    """Return ``(verdict, reason, factor)`` or None while the outcome is still open.

    ``verdicts`` maps factor tag to True (approve) / False (decline); absent
    tags have not reported.
    """
    for tag in sorted(policy.required):
        if verdicts.get(tag) is False:
            return DECLINE, "FACTOR_DECLINED", tag
    missing_required = [t for t in sorted(policy.required) if t not in verdicts]
    optional_ok = sum(1 for t in policy.optional if verdicts.get(t) is True)
    expected_optional = policy.optional if token_factors is None else policy.optional & frozenset(token_factors)
    optional_pending = sum(1 for t in expected_optional if t not in verdicts)
    if deadline_passed:
        if missing_required:
            return DECLINE, "TIMEOUT", missing_required[0]
        if optional_ok >= policy.optional_quorum:
            return APPROVE, None, None
        return DECLINE, "QUORUM_SHORTFALL", None
    # before the deadline, settle only what no later result could change
    if optional_ok + optional_pending < policy.optional_quorum:
        return DECLINE, "QUORUM_SHORTFALL", None
    if not missing_required and optional_ok >= policy.optional_quorum:
        return APPROVE, None, None
    return None


def decide(txn_id: bytes, policy: DecisionPolicy, table: PendingTable, now_ms: int,
           session: str = "") -> Decision:
    pending = table.get(txn_id, session)
    if pending is None or pending.registered_at_ms is None:
        raise KeyError(f"unknown transaction {txn_id.hex()}/{session}")
    if pending.decision is not None:
        return pending.decision
    deadline = pending.registered_at_ms + policy.deadline_ms
    results = pending.first_by_factor(before_ms=deadline)
    verdicts = {tag: r.approved for tag, r in results.items()}
    outcome = evaluate(policy, verdicts, now_ms >= deadline, pending.token_factors)
    if outcome is None:
        raise ValueError("decision requested before it is determined")
    verdict, reason, factor = outcome
    contributing = tuple((tag, r.verdict, r.reason) for tag, r in sorted(results.items()))
    pending.decision = Decision(
        txn_id, verdict, contributing,
        decline_reason=reason,
        decline_factor=factor if reason == "FACTOR_DECLINED" else None,
        session=session,
    )
    return pending.decision


def try_decide(txn_id, policy, table, now_ms, session=""):
    try:
        return decide(txn_id, policy, table, now_ms, session)
    except ValueError:
        return None


class CardNetwork:
    """The network's domain state; messaging lives in :mod:`mpay.roles`."""

    def __init__(self, policy: DecisionPolicy | None = None, issuer_pans=(), node_keys=None,
                 *, window_s: int = 60, rng=None):
        self.policy = policy or DecisionPolicy()
        self.registry = ProvisionRegistry(issuer_pans)
        self.node_keys = dict(node_keys or {})
        self.window_s = window_s
        self.rng = rng or SystemRng()
        self.table = PendingTable()

    def provision(self, pan: str, wallet_id: bytes) -> bytes:
        return provision_token(pan, wallet_id, self.registry, self.rng)

    def validate_baseline(self, ottc, wallet_id, t, now) -> bool:
        return validate_baseline(ottc, wallet_id, t, self.registry, now, self.window_s)

    def state_json(self) -> dict:
        return {"registry": self.registry.to_json()}

    def load_state(self, obj: dict):
        if "registry" in obj:
            issuer = self.registry.issuer
            self.registry = ProvisionRegistry.from_json(obj["registry"])
            self.registry.issuer.update(issuer)
