import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mpay.card_network import CardNetwork  # noqa: E402
from mpay.codec import BIO, FUND, LOC, AmountMinor, GeoCell  # noqa: E402
from mpay.netsim.prng import Xoshiro256  # noqa: E402
from mpay.nodes import AccountLedger, BioNode, FundNode, LocNode  # noqa: E402
from mpay.wallet import Wallet, WalletState  # noqa: E402

NOW = 1_700_000_000
HOME = GeoCell(3776, -12242)
PAN = "4111111111111111"


class Clock:
    def __init__(self, t=NOW):
        self.t = t

    def __call__(self):
        return self.t


class Bench:
    """One wallet enrolled directly with in-memory nodes; no transport."""

    def __init__(self, seed=0, balance=10_000, tolerance=1):
        rng = Xoshiro256.from_seed(seed, "bench")
        self.clock = Clock()
        self.network = CardNetwork(issuer_pans=[PAN], rng=Xoshiro256.from_seed(seed, "net"))
        self.fund = FundNode("fund", b"k" * 32, ledger=AccountLedger({"acct": AmountMinor(balance, "USD")}),
                             rng=Xoshiro256.from_seed(seed, "fund"))
        self.bio = BioNode("bio", b"b" * 32, rng=Xoshiro256.from_seed(seed, "bio"))
        self.loc = LocNode("loc", b"l" * 32, tolerance_cells=tolerance, rng=Xoshiro256.from_seed(seed, "loc"))
        state = WalletState.create(rng, account_id="acct", device_id="dev")
        state.enrolled_template = rng.randbytes(32)
        self.wallet = Wallet(state, clock=self.clock)
        self.wallet.provision_card(PAN, self.network)
        for tag, node in ((FUND, self.fund), (BIO, self.bio), (LOC, self.loc)):
            self.wallet.enroll_factor(tag, node)
        self.loc.ingest_fix("dev", HOME, NOW - 5)

    @property
    def nodes(self):
        return {FUND: self.fund, BIO: self.bio, LOC: self.loc}

    def token(self, amount=1999, biometric=None, cell=HOME, factors=None):
        inputs = self.wallet.capture(AmountMinor(amount, "USD"), biometric, cell)
        return self.wallet.initiate_payment(inputs, factors)

    def verdicts(self, token_bytes, now=NOW, session="s"):
        return {tag: node.handle_submit(token_bytes, now, session) for tag, node in self.nodes.items()}


@pytest.fixture
def bench():
    return Bench()


# -- acceptance summary ---------------------------------------------------

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(name: str, ok: bool, detail: str = ""):
    ACCEPTANCE[name] = (bool(ok), detail)
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else ""))
