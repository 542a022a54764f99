"""Scenario engine: build a world of roles on a backend and run a script.

A scenario is a JSON document (see ``scenarios/scenario.schema.json``).
Every random choice comes from a labelled PRNG substream of the scenario
seed, so a (scenario, seed) pair always produces the same report and,
on the simulator, the same event trace.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
import time
from pathlib import Path

import jsonschema

from .. import codec
from ..card_network import CardNetwork, DecisionPolicy
from ..codec import BIO, FUND, LOC, AmountMinor, GeoCell
from ..errors import ConfigError, MPayError
from ..netsim.prng import Xoshiro256
from ..netsim.sim import DEFAULT_EPOCH, LinkFaults, Simulator
from ..netsim.tcp import TcpHost
from ..nodes import (
    AccountLedger,
    BioNode,
    FactorRegistry,
    FundNode,
    LocNode,
    keyed_extension_verifier,
)
from ..roles import Injector, NetworkRole, NodeRole, PosRole, WalletRole
from ..wallet import Wallet, WalletState
from .report import RunReport, TxnRow

SCENARIO_DIR = Path(__file__).parent / "scenarios"
SCHEMA_PATH = SCENARIO_DIR / "scenario.schema.json"
SIM_HORIZON_MS = 3_600_000
ATTACK_OPS = {"replay", "tamper"}


class ScenarioError(ConfigError):
    pass


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.json") if p.name != SCHEMA_PATH.name)


def resolve_scenario(ref) -> Path:
    path = Path(ref)
    if path.exists():
        return path
    candidate = SCENARIO_DIR / f"{ref}.json"
    if candidate.exists():
        return candidate
    raise ScenarioError(f"no scenario file or bundled scenario named {ref!r}")


def _schema():
    with open(SCHEMA_PATH) as fh:
        return json.load(fh)


def _field_path(path) -> str:
    out = ""
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


_WS = re.compile(r"\s*")


def value_lines(text: str) -> dict:
    """Map the path of every value in a JSON document to its 1-based line."""
    dec = json.JSONDecoder()
    out = {}

    def skip(i):
        return _WS.match(text, i).end()

    def value(i, path):
        i = skip(i)
        out[path] = text.count("\n", 0, i) + 1
        opener = text[i]
        if opener not in "{[":
            return dec.raw_decode(text, i)[1]
        closer = "}" if opener == "{" else "]"
        i = skip(i + 1)
        if text[i] == closer:
            return i + 1
        n = 0
        while True:
            if opener == "{":
                key, i = dec.raw_decode(text, skip(i))
                i = value(skip(i) + 1, path + (key,))  # past the colon
            else:
                i = value(i, path + (n,))
                n += 1
            i = skip(i)
            if text[i] == ",":
                i += 1
                continue
            return i + 1

    value(0, ())
    return out


def validate_scenario(doc: dict, source: str = "<scenario>", text: str | None = None) -> dict:
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.path)))
    if errors:
        lines_of = value_lines(text) if text is not None else {}
        lines = []
        for e in errors[:10]:
            line = lines_of.get(tuple(e.path))
            where = f"{source}:{line}" if line else source
            lines.append(f"{where}: {_field_path(e.path)}: {e.message}")
        raise ScenarioError("scenario failed validation:\n" + "\n".join(lines))
    lines_of = value_lines(text) if text is not None else {}

    def fail(path, msg):
        line = lines_of.get(tuple(path))
        where = f"{source}:{line}" if line else source
        raise ScenarioError(f"{where}: {_field_path(path)}: {msg}")

    wallets = {w["name"] for w in doc["wallets"]}
    labels = set()
    try:
        DecisionPolicy.from_json(doc.get("policy", {"required": ["FUND", "BIO", "LOC"]}))
    except (ValueError, MPayError) as exc:
        fail(("policy",), exc)
    for i, ext in enumerate(doc.get("extensions", [])):
        try:
            codec.factor_tag(ext["factor"])
        except ValueError as exc:
            fail(("extensions", i, "factor"), exc)
    for i, action in enumerate(doc["script"]):
        here = ("script", i)
        op = action["op"]
        wallet = action.get("wallet")
        if wallet is not None and wallet not in wallets:
            fail(here + ("wallet",), f"unknown wallet {wallet!r}")
        if op in ("enroll", "fix", "pay", "mint", "clone", "baseline") and wallet is None:
            fail(here, f"op {op!r} needs a wallet")
        if op == "clone":
            if not action.get("as"):
                fail(here, "clone needs 'as'")
            wallets.add(action["as"])
        of = action.get("of")
        if of is not None and of not in labels:
            fail(here + ("of",), f"label {of!r} is not defined earlier in the script")
        if op in ("replay", "tamper", "forge_result", "capture", "void") and of is None:
            fail(here, f"op {op!r} needs 'of'")
        if "label" in action:
            if action["label"] in labels:
                fail(here + ("label",), f"duplicate label {action['label']!r}")
            labels.add(action["label"])
        for j, f in enumerate(action.get("factors", [])):
            try:
                codec.factor_tag(f)
            except ValueError as exc:
                fail(here + ("factors", j), exc)
    return doc


def load_scenario(ref) -> dict:
    path = resolve_scenario(ref)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return validate_scenario(doc, str(path), text)


# -- backends ---------------------------------------------------------------

class SimNet:
    kind = "sim"

    def __init__(self, seed: int, epoch: int):
        self.sim = Simulator(seed, epoch=epoch, record_frames=True)

    def reserve(self, name: str) -> str:
        return name

    def start(self, name: str, role):
        self.sim.add_role(role, name)

    def set_faults(self, src, dst, faults: LinkFaults):
        self.sim.set_faults(src, dst, faults)

    def call(self, name, fn):
        return fn(self.sim.roles[name])

    def settle(self, done=None):
        self.sim.run_until_idle(horizon_ms=SIM_HORIZON_MS)

    def advance(self, ms: int):
        self.sim.advance(ms)

    def trace_digest(self) -> str:
        blob = json.dumps(self.sim.trace_json(), separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def close(self):
        pass


class TcpNet:
    """Every role on its own localhost socket inside this process."""

    kind = "tcp"

    def __init__(self, timeout_s: float = 10.0):
        self.hosts: dict[str, TcpHost] = {}
        self.timeout_s = timeout_s

    def reserve(self, name: str) -> str:
        host = TcpHost("127.0.0.1:0", name)
        self.hosts[name] = host
        return host.address

    def start(self, name: str, role):
        self.hosts[name].start(role)

    def set_faults(self, src, dst, faults):
        pass  # real sockets: no injected faults

    def call(self, name, fn):
        return self.hosts[name].inspect(fn)

    def settle(self, done=None):
        if done is None:
            time.sleep(0.05)
            return
        deadline = time.monotonic() + self.timeout_s
        while time.monotonic() < deadline:
            if done():
                return
            time.sleep(0.005)
        raise MPayError("tcp backend: action did not settle before timeout")

    def advance(self, ms: int):
        time.sleep(ms / 1000.0)

    def trace_digest(self) -> str:
        return ""

    def close(self):
        for host in self.hosts.values():
            host.stop()


# -- world ------------------------------------------------------------------

_VERIFIERS = {
    "keyed": keyed_extension_verifier,
    "approve": lambda token, node, now: "OK",
    "decline": lambda token, node, now: "MISMATCH",
}


class World:
    def __init__(self, doc: dict, seed: int | None = None, backend: str = "sim"):
        self.doc = doc
        self.seed = int(doc.get("seed", 0) if seed is None else seed)
        self.epoch = int(doc.get("epoch", DEFAULT_EPOCH))
        self.policy = DecisionPolicy.from_json(doc.get("policy", {"required": ["FUND", "BIO", "LOC"]}))
        self.window_s = int(doc.get("window_s", 60))
        self.tolerance = int(doc.get("tolerance_cells", 1))
        if backend == "sim":
            self.net = SimNet(self.seed, self.epoch)
        elif backend == "tcp":
            self.net = TcpNet()
        else:
            raise ConfigError(f"unknown backend {backend!r}")
        self.backend = backend
        self.report = RunReport(doc["name"], self.seed, backend)
        self.labels: dict[str, dict] = {}
        self.wallets: dict[str, WalletRole] = {}
        self.clones: set[str] = set()
        self.homes: dict[str, GeoCell] = {}
        self._seq = 0
        self._seen_txns: set[str] = set()
        self._build()

    def rng(self, label: str) -> Xoshiro256:
        return Xoshiro256.from_seed(self.seed, label)

    def _build(self):
        doc = self.doc
        addr = {}
        ext_specs = [(codec.factor_tag(e["factor"]), e.get("verifier", "keyed")) for e in doc.get("extensions", [])]
        node_names = ["fund", "bio", "loc"] + [f"ext-{tag:02x}" for tag, _ in ext_specs]
        for name in ["network", "pos", "attacker", *node_names]:
            addr[name] = self.net.reserve(name)
        for w in doc["wallets"]:
            addr[f"wallet:{w['name']}"] = self.net.reserve(f"wallet:{w['name']}")
        self.addr = addr

        mac_keys = {name: self.rng(f"mac:{name}").randbytes(32) for name in node_names}
        accounts = {f"acct-{w['name']}": AmountMinor(int(w.get("balance", 10_000)), w.get("currency", "USD"))
                    for w in doc["wallets"]}
        self.fund = FundNode("fund", mac_keys["fund"], ledger=AccountLedger(accounts),
                             window_s=self.window_s, rng=self.rng("role:fund"))
        self.bio = BioNode("bio", mac_keys["bio"], window_s=self.window_s, rng=self.rng("role:bio"))
        self.loc = LocNode("loc", mac_keys["loc"], tolerance_cells=self.tolerance,
                           window_s=self.window_s, rng=self.rng("role:loc"))
        self.registry = FactorRegistry()
        nodes = {FUND: self.fund, BIO: self.bio, LOC: self.loc}
        for tag, kind in ext_specs:
            nodes[tag] = self.registry.register_extension_verifier(
                tag, _VERIFIERS[kind], node_id=f"ext-{tag:02x}", mac_key=mac_keys[f"ext-{tag:02x}"],
                window_s=self.window_s, rng=self.rng(f"role:ext-{tag:02x}"))
        self.nodes = nodes

        pans = doc.get("issuer_pans", [w["pan"] for w in doc["wallets"]])
        self.card = CardNetwork(self.policy, pans, {n.node_id: n.mac_key for n in nodes.values()},
                                window_s=self.window_s, rng=self.rng("role:network"))
        self.network_role = NetworkRole(self.card, "network")
        directory = [(tag, addr[node.node_id]) for tag, node in sorted(nodes.items())]
        self.pos = PosRole(addr["network"], directory, deadline_ms=self.policy.deadline_ms,
                           margin_ms=int(doc.get("margin_ms", 200)), name="pos")
        self.attacker = Injector("attacker")
        self.node_roles = {tag: NodeRole(node, addr["network"], node.node_id) for tag, node in nodes.items()}

        for link in doc.get("links", []):
            faults = LinkFaults(**{k: v for k, v in link.items() if k not in ("from", "to")})
            self.net.set_faults(link["from"], link["to"], faults)

        self.net.start("network", self.network_role)
        self.net.start("pos", self.pos)
        self.net.start("attacker", self.attacker)
        for node in nodes.values():
            self.net.start(node.node_id, self.node_roles[node.factor_tag])
        for w in doc["wallets"]:
            self._add_wallet(w)

    def _add_wallet(self, entry: dict):
        name = entry["name"]
        rng = self.rng(f"wallet:{name}")
        state = WalletState.create(rng, account_id=f"acct-{name}", device_id=f"device-{name}")
        state.enrolled_template = bytes.fromhex(entry["template"]) if "template" in entry else rng.randbytes(32)
        for tag in self.nodes:
            if tag >= codec.EXTENSION_MIN:
                state.extension_captures[tag] = rng.randbytes(16)
        self.homes[name] = GeoCell(*entry.get("home", [3776, -12242]))
        self._start_wallet(name, state, entry)

    def _start_wallet(self, name, state, entry):
        role_name = f"wallet:{name}"
        if role_name not in self.addr:
            self.addr[role_name] = self.net.reserve(role_name)
        wallet = Wallet(state)
        role = WalletRole(wallet, network_addr=self.addr["network"],
                          node_addrs={tag: self.addr[n.node_id] for tag, n in self.nodes.items()},
                          pos_addr=self.addr["pos"], name=role_name)
        role.home_cell = self.homes[name]
        role.pan = entry["pan"]
        role.currency = entry.get("currency", "USD")
        self.wallets[name] = role
        self.net.start(role_name, role)

    # -- helpers -----------------------------------------------------------

    def _cell(self, name: str, given) -> GeoCell:
        home = self.homes[name]
        if given is None or given == "home":
            return home
        if isinstance(given, dict):
            return home.offset(*given["offset"])
        return GeoCell(int(given[0]), int(given[1]))

    def _biometric(self, role: WalletRole, given, label: str) -> bytes:
        template = role.wallet.state.enrolled_template
        if given is None or given == "enrolled":
            return template
        if given == "random":
            return self.rng(f"bio:{label}").randbytes(32)
        if "flip_bit" in given:
            bit = given["flip_bit"]
            out = bytearray(template)
            out[bit // 8] ^= 1 << (bit % 8)
            return bytes(out)
        return bytes.fromhex(given["hex"])

    def _pos_count(self) -> int:
        return self.net.call("pos", lambda pos: len(pos.sessions))

    def _taps_settled(self, before: int, expected: int):
        def done():
            def check(pos):
                sessions = list(pos.sessions.values())[before:]
                return len(sessions) >= expected and all(s.terminal for s in sessions)
            return self.net.call("pos", check)
        return done

    def _collect_rows(self, before: int, action: dict, wallet: str, attack: bool):
        def grab(pos):
            return [(s, pos.receipt(s)) for s in list(pos.sessions.values())[before:]]
        rows = []
        for session, receipt in self.net.call("pos", grab):
            self._seq += 1
            factors = {name: reason for name, _, reason in receipt.get("contributing", [])}
            txn = receipt.get("txn_id", "")
            row = TxnRow(
                seq=self._seq,
                action=action.get("label", action["op"]),
                op=action["op"],
                wallet=wallet,
                attack=attack or (bool(txn) and txn in self._seen_txns),
                session=session.session_id,
                txn_id=txn,
                verdict=receipt["verdict"],
                reason=receipt.get("summary") or "",
                pos_state=receipt["pos_state"],
                factors=factors,
                latency_ms=int(receipt.get("latency_ms", 0)),
            )
            if txn:
                self._seen_txns.add(txn)
            rows.append(row)
        self.report.rows.extend(rows)
        return rows

    def _tap_and_collect(self, action, wallet, attack, tap, expected=1):
        before = self._pos_count()
        tap()
        self.net.settle(self._taps_settled(before, expected))
        rows = self._collect_rows(before, action, wallet, attack)
        self._check_expect(action, rows)
        return rows

    def _check_expect(self, action, rows):
        expect = action.get("expect")
        if not expect:
            return
        name = f"{action.get('label', action['op'])} expect {json.dumps(expect, sort_keys=True)}"
        targets = rows[:1] if action["op"] in ("pay", "baseline") else rows
        if not targets:
            self.report.check(name, False, "no transaction recorded")
            return
        bad = [r for r in targets
               if ("verdict" in expect and r.verdict != expect["verdict"])
               or ("reason" in expect and r.reason != expect["reason"])]
        detail = "; ".join(f"{r.session}: {r.verdict} {r.reason}" for r in bad[:5])
        self.report.check(name, not bad, detail)

    # -- ops ---------------------------------------------------------------

    def run(self) -> RunReport:
        try:
            for action in self.doc["script"]:
                getattr(self, f"op_{action['op']}")(action)
            self.net.settle()
        finally:
            self.report.forged_results = self.card.table.forged
            self.report.trace_digest = self.net.trace_digest()
            self.net.close()
        self._check_totals()
        return self.report

    def _check_totals(self):
        agg = self.report.aggregates
        for key, want in sorted(self.doc.get("expect", {}).items()):
            got = agg.get(key)
            self.report.check(f"{key} == {json.dumps(want, sort_keys=True)}", got == want, f"got {got}")
        self.report.check("aggregates reconcile", self.report.reconciles())

    def op_enroll(self, action):
        role = self.wallets[action["wallet"]]
        factors = [codec.factor_tag(f) for f in action["factors"]] if "factors" in action else None
        self.net.call(role.name, lambda r: r.begin_enrollment(r.pan, factors))
        self.net.settle(lambda: self.net.call(role.name, lambda r: bool(r.errors) or r.enrolled))
        errors = self.net.call(role.name, lambda r: list(r.errors))
        self.report.check(f"enroll {action['wallet']}", not errors, ", ".join(errors))

    def op_fix(self, action):
        name = action["wallet"]
        role = self.wallets[name]
        cell = self._cell(name, action.get("cell"))
        t = self.net.call(role.name, lambda r: r.wallet.clock())
        self.net.call(role.name, lambda r: r.send_fix(cell, t))
        device = role.wallet.state.device_id
        self.net.settle(lambda: self.net.call("loc", lambda n: (n.node.store.fix(device) or (None, -1))[1] >= t))

    def _mint(self, action) -> bytes:
        name = action["wallet"]
        role = self.wallets[name]
        amount = AmountMinor(int(action.get("amount", 1999)), action.get("currency", role.currency))
        biometric = self._biometric(role, action.get("biometric"), action.get("label", str(self._seq)))
        cell = self._cell(name, action.get("cell"))
        factors = [codec.factor_tag(f) for f in action["factors"]] if "factors" in action else None

        def build(r):
            r.wallet.skew_s = int(action.get("clock_skew_s", 0))
            try:
                return r.wallet.initiate_payment(r.wallet.capture(amount, biometric, cell), factors)
            finally:
                r.wallet.skew_s = 0
        token = self.net.call(role.name, build)
        if "label" in action:
            self.labels[action["label"]] = {"token": token, "wallet": name}
        return token

    def op_mint(self, action):
        self._mint(action)

    def op_pay(self, action):
        name = action["wallet"]
        token = self._mint(action)
        role = self.wallets[name]
        attack = bool(action.get("attack", False)) or name in self.clones
        self._tap_and_collect(action, name, attack, lambda: self.net.call(role.name, lambda r: r.tap(token)))

    def op_replay(self, action):
        ref = self.labels[action["of"]]
        for _ in range(int(action.get("times", 1))):
            if action.get("ms"):
                self.net.advance(int(action["ms"]))
            self._tap_and_collect(action, ref["wallet"], True,
                                  lambda: self.net.call("attacker", lambda a: a.tap(self.addr["pos"], ref["token"])))

    def op_tamper(self, action):
        ref = self.labels[action["of"]]
        token = ref["token"]
        positions = range(len(token)) if action.get("positions", "all") == "all" else action["positions"]
        mask = int(action.get("xor", 0xFF))
        for pos in positions:
            corrupted = bytearray(token)
            corrupted[pos] ^= mask
            data = bytes(corrupted)
            self._tap_and_collect({**action, "label": f"{action.get('label', 'tamper')}@{pos}",
                                   "expect": action.get("expect")}, ref["wallet"], True,
                                  lambda: self.net.call("attacker", lambda a: a.tap(self.addr["pos"], data)))

    def op_clone(self, action):
        src = self.wallets[action["wallet"]]
        new = action["as"]
        state = copy.deepcopy(src.wallet.state)
        self.homes[new] = self.homes[action["wallet"]]
        entry = next(w for w in self.doc["wallets"] if w["name"] == action["wallet"])
        self.clones.add(new)
        self._start_wallet(new, state, entry)

    def op_advance(self, action):
        self.net.advance(int(action.get("ms", 0)))

    def op_forge_result(self, action):
        from ..nodes import AuthResult
        ref = self.labels[action["of"]]
        fake = AuthResult(codec.txn_id(ref["token"]), LOC, "APPROVE", "OK", "loc", session="pos-1")
        def forged():
            return self.net.call("network", lambda r: r.network.table.forged)
        before = forged()
        self.net.call("attacker", lambda a: a.forge_result(self.addr["network"], fake))
        self.net.settle(lambda: forged() > before)

    def op_capture(self, action):
        txn = codec.txn_id(self.labels[action["of"]]["token"])
        self.net.call("fund", lambda n: n.node.ledger.capture(txn))

    def op_void(self, action):
        txn = codec.txn_id(self.labels[action["of"]]["token"])
        self.net.call("fund", lambda n: n.node.ledger.void(txn))

    def op_baseline(self, action):
        name = action["wallet"]
        role = self.wallets[name]

        def tap(r):
            r.wallet.skew_s = int(action.get("clock_skew_s", 0))
            try:
                return r.tap_baseline()
            finally:
                r.wallet.skew_s = 0
        self._tap_and_collect(action, name, bool(action.get("attack", False)),
                              lambda: self.net.call(role.name, tap))


def run_scenario(ref, seed: int | None = None, backend: str = "sim") -> RunReport:
    doc = load_scenario(ref) if not isinstance(ref, dict) else validate_scenario(ref)
    return World(doc, seed, backend).run()


ATTACK_KINDS = ("replay", "tamper", "stolen_token", "wrong_location", "stale_clock")


def attack(kind: str, trials: int = 1, seed: int = 0, backend: str = "sim") -> RunReport:
    """Run the bundled scenario for ``kind`` over ``trials`` consecutive seeds."""
    from .report import merge

    if kind not in ATTACK_KINDS:
        raise ConfigError(f"unknown attack kind {kind!r}; expected one of {', '.join(ATTACK_KINDS)}")
    doc = load_scenario(f"attack_{kind}")
    reports = [World(doc, seed + i, backend).run() for i in range(trials)]
    merged = merge(reports, doc["name"], backend)
    merged.check("zero attack approvals", merged.aggregates["attack_approvals"] == 0,
                 f"got {merged.aggregates['attack_approvals']}")
    return merged
