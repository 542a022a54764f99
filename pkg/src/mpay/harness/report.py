"""Run reports: one row per POS session plus reconciled aggregates."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field


@dataclass
class TxnRow:
    seq: int
    action: str
    op: str
    wallet: str
    attack: bool
    session: str
    txn_id: str
    verdict: str
    reason: str
    pos_state: str
    factors: dict
    latency_ms: int
    trial: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def attack_approvals(rows) -> int:
    """Approvals on attack rows, plus any approval beyond the first for one txn_id.

    The second term catches a replay that beat the original through the
    network: whichever session won, the same token paid twice.
    """
    flagged = sum(r.verdict == "APPROVE" and r.attack for r in rows)
    honest = Counter((r.trial, r.txn_id) for r in rows if r.verdict == "APPROVE" and not r.attack and r.txn_id)
    return flagged + sum(n - 1 for n in honest.values())


@dataclass
class RunReport:
    scenario: str
    seed: int
    backend: str = "sim"
    rows: list = field(default_factory=list)
    forged_results: int = 0
    trace_digest: str = ""
    checks: list = field(default_factory=list)  # (name, ok, detail)

    @property
    def aggregates(self) -> dict:
        reasons = Counter(r.reason for r in self.rows if r.verdict != "APPROVE")
        return {
            "transactions": len(self.rows),
            "approvals": sum(r.verdict == "APPROVE" for r in self.rows),
            "declines": sum(r.verdict != "APPROVE" for r in self.rows),
            "attack_approvals": attack_approvals(self.rows),
            "declines_by_reason": dict(sorted(reasons.items())),
            "forged_results": self.forged_results,
        }

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def reconciles(self) -> bool:
        agg = self.aggregates
        return (
            agg["approvals"] + agg["declines"] == agg["transactions"]
            and sum(agg["declines_by_reason"].values()) == agg["declines"]
        )

    def check(self, name: str, ok: bool, detail: str = ""):
        self.checks.append((name, bool(ok), detail))

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "backend": self.backend,
            "transactions": [r.to_json() for r in self.rows],
            "aggregates": self.aggregates,
            "trace_digest": self.trace_digest,
            "checks": [{"check": n, "ok": ok, "detail": d} for n, ok, d in self.checks],
            "passed": self.passed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "RunReport":
        report = cls(obj["scenario"], obj["seed"], obj.get("backend", "sim"))
        report.rows = [TxnRow(**r) for r in obj.get("transactions", [])]
        report.forged_results = obj.get("aggregates", {}).get("forged_results", 0)
        report.trace_digest = obj.get("trace_digest", "")
        report.checks = [(c["check"], c["ok"], c.get("detail", "")) for c in obj.get("checks", [])]
        return report

    def table(self) -> str:
        head = ["#", "action", "wallet", "atk", "txn", "verdict", "reason", "ms"]
        body = [
            [str(r.seq), r.action, r.wallet, "y" if r.attack else "", r.txn_id[:12],
             r.verdict, r.reason or "", str(r.latency_ms)]
            for r in self.rows
        ]
        widths = [max(len(x) for x in col) for col in zip(head, *body)] if body else [len(h) for h in head]
        lines = [f"scenario {self.scenario}  seed {self.seed}  backend {self.backend}"]
        lines.append("  ".join(h.ljust(w) for h, w in zip(head, widths)))
        lines.append("  ".join("-" * w for w in widths))
        for row in body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
        agg = self.aggregates
        lines.append("")
        lines.append(f"transactions {agg['transactions']}  approvals {agg['approvals']}  "
                     f"declines {agg['declines']}  attack approvals {agg['attack_approvals']}  "
                     f"forged results {agg['forged_results']}")
        for reason, n in agg["declines_by_reason"].items():
            lines.append(f"  {reason:<28} {n}")
        for name, ok, detail in self.checks:
            lines.append(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail and not ok else ""))
        return "\n".join(lines) + "\n"


def merge(reports, scenario: str, backend: str = "sim") -> RunReport:
    """Fold per-trial reports into one, tagging rows with their trial index."""
    merged = RunReport(scenario, reports[0].seed if reports else 0, backend)
    for i, rep in enumerate(reports):
        for row in rep.rows:
            row.trial = i
            merged.rows.append(row)
        merged.forged_results += rep.forged_results
        merged.checks.extend((f"trial {i} (seed {rep.seed}): {n}", ok, d) for n, ok, d in rep.checks if not ok)
    return merged
