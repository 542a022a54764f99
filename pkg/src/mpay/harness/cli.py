"""``mpay`` command line.

Exit codes: 0 when everything ran with the expected outcome, 1 for usage or
configuration errors, 2 when a run finished but its assertions failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import socket
import sys
import threading
import time
from pathlib import Path

import jsonschema

from .. import codec
from ..card_network import CardNetwork, DecisionPolicy
from ..codec import BIO, FUND, LOC, AmountMinor, GeoCell
from ..errors import ConfigError, MPayError
from ..netsim.frames import MsgType, unpack_json
from ..netsim.tcp import TcpHost, parse_addr, request
from ..nodes import AccountLedger, BioNode, FundNode, LocNode, SystemRng
from ..roles import NetworkRole, NodeRole, PosRole, WalletRole
from ..wallet import Wallet, WalletState
from .engine import ATTACK_KINDS, World, attack, bundled_scenarios, load_scenario, validate_scenario, value_lines
from .report import RunReport

log = logging.getLogger("mpay")

SERVE_ROLES = ("wallet", "pos", "fund", "bio", "loc", "network")
NODE_TAGS = {"fund": FUND, "bio": BIO, "loc": LOC}
HEX32 = {"type": "string", "pattern": "^[0-9a-f]{64}$"}
ADDR = {"type": "string", "pattern": "^[^:]+:[0-9]+$"}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["roles"],
    "properties": {
        "window_s": {"type": "integer", "minimum": 0},
        "policy": {"type": "object"},
        "issuer_pans": {"type": "array", "items": {"type": "string", "pattern": "^[0-9]{16,19}$"}},
        "keys": {"type": "object", "additionalProperties": HEX32},
        "roles": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "network": {"type": "object", "additionalProperties": False,
                            "properties": {"listen": ADDR, "state": {"type": "string"}}},
                "pos": {"type": "object", "additionalProperties": False,
                        "properties": {"listen": ADDR, "receipts": {"type": "string"},
                                       "margin_ms": {"type": "integer", "minimum": 0}}},
                "fund": {"type": "object", "additionalProperties": False,
                         "properties": {"listen": ADDR, "state": {"type": "string"},
                                        "accounts": {"type": "object", "additionalProperties": {
                                            "type": "object", "required": ["balance"], "additionalProperties": False,
                                            "properties": {"balance": {"type": "integer", "minimum": 0},
                                                           "currency": {"type": "string", "pattern": "^[A-Z]{3}$"}}}}}},
                "bio": {"type": "object", "additionalProperties": False,
                        "properties": {"listen": ADDR, "state": {"type": "string"}}},
                "loc": {"type": "object", "additionalProperties": False,
                        "properties": {"listen": ADDR, "state": {"type": "string"},
                                       "tolerance_cells": {"type": "integer", "minimum": 0, "maximum": 16}}},
                "wallet": {"type": "object", "additionalProperties": False,
                           "properties": {"listen": ADDR, "state": {"type": "string"},
                                          "pan": {"type": "string", "pattern": "^[0-9]{16,19}$"},
                                          "account_id": {"type": "string"}, "device_id": {"type": "string"},
                                          "template": HEX32,
                                          "home": {"type": "array", "items": {"type": "integer"},
                                                   "minItems": 2, "maxItems": 2}}},
            },
        },
    },
}


# -- config -----------------------------------------------------------------

def load_config(path: str | None) -> dict:
    path = path or os.environ.get("MPA_CONFIG")
    if not path:
        raise ConfigError("no config file: pass --config or set MPA_CONFIG")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(cfg), key=lambda e: list(map(str, e.path)))
    if errors:
        lines = value_lines(text)
        e = errors[0]
        field = ".".join(map(str, e.path)) or "<root>"
        raise ConfigError(f"{path}:{lines.get(tuple(e.path), '?')}: {field}: {e.message}")
    try:
        cfg["_policy"] = DecisionPolicy.from_json(cfg.get("policy", {"required": ["FUND", "BIO", "LOC"]}))
    except (ValueError, MPayError) as exc:
        raise ConfigError(f"{path}: policy: {exc}") from None
    cfg["_path"] = str(path)
    return cfg


def _write_private(path, obj):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load state {path}: {exc}") from None


class JsonlLog(list):
    """List that also appends every item to a JSON-lines file."""

    def __init__(self, path):
        super().__init__()
        self.path = path

    def append(self, item):
        super().append(item)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(item, sort_keys=True) + "\n")


class Deployment:
    """Builds role objects for one process from the shared deployment config."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.roles = cfg["roles"]
        self.window_s = int(cfg.get("window_s", 60))
        self.policy = cfg["_policy"]

    def section(self, role: str) -> dict:
        if role not in self.roles:
            raise ConfigError(f"{self.cfg['_path']}: roles.{role}: section missing")
        return self.roles[role]

    def addr(self, role: str) -> str:
        addr = self.section(role).get("listen")
        if not addr:
            raise ConfigError(f"{self.cfg['_path']}: roles.{role}.listen: needed by peers")
        return addr

    def key(self, node: str) -> bytes:
        keys = self.cfg.get("keys", {})
        if node not in keys:
            raise ConfigError(f"{self.cfg['_path']}: keys.{node}: missing MAC key")
        return bytes.fromhex(keys[node])

    def node_addrs(self) -> dict:
        return {tag: self.addr(name) for name, tag in NODE_TAGS.items() if name in self.roles}

    def build(self, role: str, state_path: str | None):
        sec = self.section(role)
        if role == "network":
            keys = {name: self.key(name) for name in NODE_TAGS if name in self.roles}
            card = CardNetwork(self.policy, self.cfg.get("issuer_pans", []), keys, window_s=self.window_s)
            if state_path and os.path.exists(state_path):
                card.load_state(_read_json(state_path))
            out = NetworkRole(card, "network")
            persist = card.state_json
        elif role in NODE_TAGS:
            node = self._node(role, sec)
            if state_path and os.path.exists(state_path):
                node.load_state(_read_json(state_path))
            out = NodeRole(node, self.addr("network"), role)
            persist = node.state_json
        elif role == "pos":
            directory = sorted((tag, addr) for tag, addr in self.node_addrs().items())
            receipts = JsonlLog(sec["receipts"]) if sec.get("receipts") else None
            return PosRole(self.addr("network"), directory, deadline_ms=self.policy.deadline_ms,
                           margin_ms=int(sec.get("margin_ms", 200)), name="pos", receipts=receipts)
        else:
            return self.wallet_role(state_path)
        if state_path:
            out.on_change = lambda _role: _write_private(state_path, persist())
        return out

    def _node(self, role, sec):
        kw = {"window_s": self.window_s}
        if role == "fund":
            accounts = {a: AmountMinor(int(v["balance"]), v.get("currency", "USD"))
                        for a, v in sec.get("accounts", {}).items()}
            return FundNode("fund", self.key("fund"), ledger=AccountLedger(accounts), **kw)
        if role == "bio":
            return BioNode("bio", self.key("bio"), **kw)
        return LocNode("loc", self.key("loc"), tolerance_cells=int(sec.get("tolerance_cells", 1)), **kw)

    def wallet_role(self, state_path: str | None, name: str = "wallet") -> WalletRole:
        sec = self.section("wallet")
        if state_path and os.path.exists(state_path):
            try:
                state = WalletState.load(state_path)
            except (OSError, ValueError, KeyError) as exc:
                raise ConfigError(f"cannot load wallet state {state_path}: {exc}") from None
        else:
            rng = SystemRng()
            state = WalletState.create(rng, account_id=sec.get("account_id"), device_id=sec.get("device_id"))
            state.enrolled_template = bytes.fromhex(sec["template"]) if "template" in sec else rng.randbytes(32)
            if not state.device_id:
                state.device_id = "device-" + state.wallet_id.hex()[:8]
        pan = sec.get("pan") or state.pan
        if not pan:
            raise ConfigError(f"{self.cfg['_path']}: roles.wallet.pan: needed to provision the card")
        role = WalletRole(Wallet(state), network_addr=self.addr("network"), node_addrs=self.node_addrs(),
                          pos_addr=self.addr("pos"), name=name)
        role.pan = pan
        if "home" in sec:
            role.home_cell = GeoCell(*sec["home"])
        if state_path:
            role.on_change = lambda r: r.wallet.state.save(state_path)
        return role


def _reachable(addrs) -> bool:
    for addr in addrs:
        try:
            socket.create_connection(parse_addr(addr), timeout=0.2).close()
        except OSError:
            return False
    return True


def _auto_enroll(host: TcpHost, role: WalletRole, peers):
    """Provision and enroll once every peer accepts connections."""
    def attempt():
        if role.enrolled:
            return
        if not _reachable(peers):
            host.call_later(250, attempt)
            return
        log.info("wallet: provisioning and enrolling")
        try:
            role.begin_enrollment(role.pan)
        except MPayError as exc:
            role.errors.append(str(exc))
            log.error("wallet: enrollment failed: %s", exc)
    host.call_later(0, attempt)


# -- commands ---------------------------------------------------------------

def _emit(report: RunReport, args):
    if getattr(args, "out", None):
        Path(args.out).write_text(report.dumps())
    sys.stdout.write(report.dumps() if args.format == "json" else report.table())
    return 0 if report.passed else 2


def cmd_simulate(args):
    doc = load_scenario(args.scenario)
    world = World(doc, args.seed, args.backend)
    report = world.run()
    if args.trace:
        if args.backend != "sim":
            raise ConfigError("--trace needs the sim backend")
        Path(args.trace).write_text(json.dumps(world.net.sim.trace_json(), separators=(",", ":")) + "\n")
    return _emit(report, args)


def cmd_attack(args):
    return _emit(attack(args.kind, args.trials, args.seed, args.backend), args)


def cmd_report(args):
    try:
        report = RunReport.from_json(json.loads(Path(args.input).read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read report {args.input}: {exc}") from None
    sys.stdout.write(report.dumps() if args.format == "json" else report.table())
    return 0


def _uses_tcp(args) -> bool:
    if args.backend:
        return args.backend == "tcp"
    return bool(args.config or os.environ.get("MPA_CONFIG"))


def _biometric_choice(value):
    if value in (None, "enrolled", "random"):
        return value or "enrolled"
    return {"hex": value}


def _cell_arg(text):
    try:
        lat, lon = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("cell must be LAT_CELL,LON_CELL (integers)") from None
    return [lat, lon]


def cmd_enroll(args):
    if not _uses_tcp(args):
        doc = validate_scenario({
            "name": "enroll", "seed": args.seed,
            "wallets": [{"name": "wallet", "pan": args.pan or "4111111111111111"}],
            "script": [{"op": "enroll", "wallet": "wallet"}],
        })
        world = World(doc, args.seed)
        report = world.run()
        state = world.wallets["wallet"].wallet.state
        print(json.dumps({"wallet_id": state.wallet_id.hex(), "provisioned": state.ot is not None,
                          "registered": [codec.factor_name(t) for t in sorted(state.registered)],
                          "ok": report.passed}, sort_keys=True))
        return 0 if report.passed else 2
    dep = Deployment(load_config(args.config))
    state_path = args.state or dep.section("wallet").get("state")
    role = dep.wallet_role(state_path, name="enroll")
    if args.pan:
        role.pan = args.pan
    host = TcpHost("127.0.0.1:0", "enroll")
    host.start(role)
    try:
        host.inspect(lambda r: r.begin_enrollment(r.pan))
        deadline = time.monotonic() + args.timeout
        while time.monotonic() < deadline:
            done = host.inspect(lambda r: r.enrolled or bool(r.errors))
            if done:
                break
            time.sleep(0.02)
        errors = host.inspect(lambda r: list(r.errors))
        enrolled = host.inspect(lambda r: r.enrolled)
    finally:
        host.stop()
    state = role.wallet.state
    print(json.dumps({"wallet_id": state.wallet_id.hex(), "provisioned": state.ot is not None,
                      "registered": [codec.factor_name(t) for t in sorted(state.registered)],
                      "errors": errors, "ok": enrolled and not errors}, sort_keys=True))
    if not enrolled and not errors:
        print("enrollment did not finish before the timeout", file=sys.stderr)
    return 0 if enrolled and not errors else 2


def _check_expect(receipt: dict, expect: str | None) -> int:
    if not expect:
        return 0
    got = {receipt.get("verdict"), receipt.get("summary") or receipt.get("decline_reason")}
    if expect in got:
        return 0
    print(f"expected {expect}, got {receipt.get('verdict')} {receipt.get('summary') or ''}".rstrip(), file=sys.stderr)
    return 2


def cmd_pay(args):
    if not _uses_tcp(args):
        pay = {"op": "pay", "wallet": "wallet", "amount": args.amount, "currency": args.currency,
               "biometric": _biometric_choice(args.biometric), "clock_skew_s": args.skew}
        if args.cell:
            pay["cell"] = args.cell
        doc = validate_scenario({
            "name": "pay", "seed": args.seed,
            "wallets": [{"name": "wallet", "pan": "4111111111111111", "balance": args.balance,
                         "currency": args.currency}],
            "script": [{"op": "enroll", "wallet": "wallet"}, {"op": "fix", "wallet": "wallet"}, pay],
        })
        report = World(doc, args.seed).run()
        row = report.rows[-1]
        receipt = {"txn_id": row.txn_id, "verdict": row.verdict, "summary": row.reason,
                   "factors": row.factors, "latency_ms": row.latency_ms, "pos_state": row.pos_state}
        print(json.dumps(receipt, sort_keys=True))
        return _check_expect(receipt, args.expect)
    cfg = load_config(args.config)
    wallet_addr = args.wallet or Deployment(cfg).addr("wallet")
    capture = {"amount": args.amount, "currency": args.currency}
    if args.cell:
        capture["cell"] = args.cell
    if args.biometric not in (None, "enrolled"):
        capture["biometric"] = os.urandom(32).hex() if args.biometric == "random" else args.biometric
    body = request(wallet_addr, MsgType.PAYMENT_SUBMIT, {"capture": capture}, MsgType.DECISION, args.timeout)
    receipt = unpack_json(body)
    print(json.dumps(receipt, sort_keys=True))
    return _check_expect(receipt, args.expect)


def cmd_serve(args):
    dep = Deployment(load_config(args.config))
    sec = dep.section(args.role)
    listen = args.listen or sec.get("listen")
    if not listen:
        raise ConfigError(f"roles.{args.role}.listen: no address (set it or pass --listen)")
    state_path = args.state or sec.get("state")
    role = dep.build(args.role, state_path)
    try:
        host = TcpHost(listen, args.role)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot bind {listen}: {exc}") from None
    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    host.start(role)
    if args.role == "wallet":
        peers = [dep.addr("network"), dep.addr("pos"), *dep.node_addrs().values()]
        _auto_enroll(host, role, peers)
    print(f"{args.role} listening on {host.address}", flush=True)
    while not stop.wait(0.2):
        pass
    host.stop()
    log.info("%s stopped", args.role)
    return 0


# -- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mpay", description="Multi-factor mobile payment harness.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def output(sp, default="table"):
        sp.add_argument("--format", choices=("json", "table"), default=default)
        sp.add_argument("--out", help="also write the JSON report here")

    sp = sub.add_parser("simulate", help="run a scenario file or bundled scenario")
    sp.add_argument("--scenario", required=True, help=f"path, or one of: {', '.join(bundled_scenarios())}")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--backend", choices=("sim", "tcp"), default="sim")
    sp.add_argument("--trace", help="write the delivery trace (sim only)")
    output(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("attack", help="run a bundled attack over several seeds")
    sp.add_argument("--kind", required=True, choices=ATTACK_KINDS)
    sp.add_argument("--trials", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--backend", choices=("sim", "tcp"), default="sim")
    output(sp)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("report", help="render a saved JSON report")
    sp.add_argument("--input", required=True)
    sp.add_argument("--format", choices=("json", "table"), default="table")
    sp.set_defaults(func=cmd_report)

    for name, func in (("enroll", cmd_enroll), ("pay", cmd_pay)):
        sp = sub.add_parser(name, help=f"{name} a wallet (simulated, or against served roles)")
        sp.add_argument("--config", help="deployment config; implies --backend tcp (or set MPA_CONFIG)")
        sp.add_argument("--backend", choices=("sim", "tcp"))
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--timeout", type=float, default=10.0)
        sp.set_defaults(func=func)
        if name == "enroll":
            sp.add_argument("--pan")
            sp.add_argument("--state", help="wallet state file to create or update")
        else:
            sp.add_argument("--amount", type=int, required=True, help="minor units")
            sp.add_argument("--currency", default="USD")
            sp.add_argument("--cell", type=_cell_arg, help="captured LAT_CELL,LON_CELL")
            sp.add_argument("--biometric", help="'enrolled', 'random', or 64 hex digits")
            sp.add_argument("--skew", type=int, default=0, help="wallet clock skew in seconds (sim)")
            sp.add_argument("--balance", type=int, default=10_000, help="account balance (sim)")
            sp.add_argument("--wallet", help="wallet address (tcp); default from config")
            sp.add_argument("--expect", help="APPROVE, DECLINE, or a reason such as LOC:MISMATCH")

    sp = sub.add_parser("serve", help="run one role as a socket server")
    sp.add_argument("--role", required=True, choices=SERVE_ROLES)
    sp.add_argument("--config", help="deployment config (or set MPA_CONFIG)")
    sp.add_argument("--listen", help="override roles.<role>.listen")
    sp.add_argument("--state", help="override roles.<role>.state")
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mpay: {exc}", file=sys.stderr)
        return 1
    except MPayError as exc:
        print(f"mpay: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
