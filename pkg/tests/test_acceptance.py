"""Acceptance criteria, one test each; a PASS/FAIL line per criterion lands in the terminal summary."""

import itertools
import json
import random
from collections import defaultdict

import oracles
from conftest import HOME, NOW, Bench, record_criterion
from mpay import codec
from mpay.card_network import CardNetwork, DecisionPolicy, PendingTable, collect_result, decide, try_decide
from mpay.codec import BIO, FUND, LOC
from mpay.errors import MPayError
from mpay.harness.engine import ATTACK_KINDS, World, load_scenario, run_scenario
from mpay.harness.report import attack_approvals, merge
from mpay.netsim.frames import decode_frame, encode_frame, split_frames, unpack_json
from mpay.netsim.prng import Xoshiro256
from mpay.nodes import AuthResult
from mpay.wallet import Wallet, WalletState


def test_baseline_equivalence():
    rng = Xoshiro256.from_seed(1, "acceptance:baseline")
    net = CardNetwork(issuer_pans=[], window_s=60)
    bad = []
    corrupted = 0
    for i in range(1000):
        state = WalletState.create(rng)
        state.ot = rng.randbytes(32)
        t = rng.randint(0, 2**40)
        net.registry.ots[state.wallet_id] = state.ot
        ottc, t_out = Wallet(state, clock=lambda: t).baseline_ottc()
        if t_out != t or ottc != oracles.ottc(state.ot, t):
            bad.append(f"wallet/oracle differ at {i}")
        if not net.validate_baseline(ottc, state.wallet_id, t, t):
            bad.append(f"network rejected honest code {i}")
        for pos in range(32):
            flipped = bytearray(ottc)
            flipped[pos] ^= rng.randint(1, 255)
            corrupted += 1
            if net.validate_baseline(bytes(flipped), state.wallet_id, t, t):
                bad.append(f"corruption accepted at {i}/{pos}")
    ok = record_criterion("baseline equivalence", not bad,
                          f"1000 (OT, t) pairs, {corrupted} single-byte corruptions" if not bad else bad[0])
    assert ok, bad[:5]


def test_regeneration_symmetry():
    rng = Xoshiro256.from_seed(2, "acceptance:symmetry")
    bad = []
    flips = ring = 0
    for i in range(1000):
        tolerance = i % 3
        b = Bench(seed=10_000 + i, tolerance=tolerance)
        t = NOW + rng.randint(-5, 5)
        b.clock.t = t
        cell = HOME.offset(rng.randint(-tolerance, tolerance), rng.randint(-tolerance, tolerance))
        raw = b.token(cell=cell)
        tok = codec.parse_payment_token(raw)
        wid = tok.wallet_id
        bio_rec, loc_rec = b.bio.records[(wid, BIO)], b.loc.records[(wid, LOC)]
        fix_cell, _ = b.loc.store.fix(loc_rec.device_id)
        # node-side recomputation from its own records
        node_bt = codec.build_biometric_token(bio_rec.template, t, bio_rec.secret)
        node_lt = codec.build_location_token(cell, t, loc_rec.secret)
        if tok.entry(BIO) != node_bt or tok.entry(BIO) != oracles.biometric_token(bio_rec.template, t, bio_rec.secret):
            bad.append(f"BT differs at {i}")
        if tok.entry(LOC) != node_lt or tok.entry(LOC) != oracles.location_token(cell.lat_cell, cell.lon_cell, t,
                                                                                   loc_rec.secret):
            bad.append(f"LT differs at {i}")
        for tag, node in ((BIO, b.bio), (LOC, b.loc)):
            if node.handle_submit(raw, t).reason != "OK":
                bad.append(f"honest {codec.factor_name(tag)} declined at {i}")

        s = b.wallet.state
        for bit in range(256):
            reading = bytearray(s.enrolled_template)
            reading[bit // 8] ^= 1 << (bit % 8)
            bt = codec.build_biometric_token(bytes(reading), t, s.preshared[BIO])
            probe = codec.parse_payment_token(codec.assemble_payment_token(wid, t, [(BIO, bt)]))
            flips += 1
            if b.bio.verify(probe, t, b"").reason != "MISMATCH":
                bad.append(f"bit {bit} of B accepted at {i}")

        k = tolerance + 1  # the ring just beyond tolerance around the stored fix
        for dlat in range(-k, k + 1):
            for dlon in range(-k, k + 1):
                if max(abs(dlat), abs(dlon)) != k:
                    continue
                off = fix_cell.offset(dlat, dlon)
                lt = codec.build_location_token(off, t, s.preshared[LOC])
                probe = codec.parse_payment_token(codec.assemble_payment_token(wid, t, [(LOC, lt)]))
                ring += 1
                if b.loc.verify(probe, t, b"").reason != "MISMATCH":
                    bad.append(f"cell {off} accepted at {i}")
    ok = record_criterion("regeneration symmetry", not bad,
                          f"1000 enrollments, {flips} B bit flips, {ring} beyond-tolerance cells" if not bad else bad[0])
    assert ok, bad[:5]


def test_fund_checks():
    bad = []
    window = 60
    for seed in range(5):
        for delta, want in ((window, "OK"), (-window, "OK"), (window + 1, "STALE"), (-window - 1, "STALE")):
            b = Bench(seed=seed)
            got = b.fund.handle_submit(b.token(), NOW + delta).reason
            if got != want:
                bad.append(f"delta {delta}: {got}")
        balance = 500 + 997 * seed
        for amount, want in ((balance, "OK"), (balance + 1, "INSUFFICIENT_FUNDS")):
            b = Bench(seed=seed, balance=balance)
            got = b.fund.handle_submit(b.token(amount=amount), NOW).reason
            if got != want:
                bad.append(f"amount {amount} of {balance}: {got}")
    b = Bench()
    raw = b.token()
    start = codec.HEADER_LEN + 3
    corrupted = 0
    for mask in (0x01, 0x80, 0xFF):
        for i in range(start, start + codec.FUND_TOKEN_LEN):
            mutated = bytearray(raw)
            mutated[i] ^= mask
            corrupted += 1
            got = b.fund.handle_submit(bytes(mutated), NOW).reason
            if got not in ("BAD_SIGNATURE", "MALFORMED"):
                bad.append(f"FT byte {i - start} ^ {mask:#x}: {got}")
    ok = record_criterion("fund checks", not bad,
                          f"window/balance boundaries, {corrupted} FT corruptions (83 bytes x 3 masks)"
                          if not bad else bad[0])
    assert ok, bad[:5]


def test_replay_defense():
    doc = load_scenario("attack_replay")
    assert doc["links"][0]["dup_prob"] == 1.0
    bad = []
    reports = []
    second_deliveries = 0
    for seed in range(100):
        world = World(doc, seed)
        reports.append(world.run())
        for tag, role in world.node_roles.items():
            per_session = defaultdict(list)
            for result in role.results:
                per_session[(result.txn_id, result.session)].append(result.reason)
            for key, seq in per_session.items():
                if len(seq) < 2:
                    bad.append(f"seed {seed}: {codec.factor_name(tag)} saw one delivery")
                    continue
                second_deliveries += 1
                if seq[1] != "DUPLICATE":
                    bad.append(f"seed {seed}: {codec.factor_name(tag)} second delivery {seq[1]}")
    merged = merge(reports, "attack_replay")
    fraud = attack_approvals(merged.rows)
    if fraud:
        bad.append(f"{fraud} fraudulent approvals")
    ok = record_criterion("replay defense", not bad,
                          f"{second_deliveries} second deliveries all DUPLICATE, 0 fraudulent approvals over 100 seeds"
                          if not bad else bad[0])
    assert ok, bad[:5]


UNIVERSE = (FUND, BIO, LOC, 0x80)
NODE_OF = {FUND: "fund", BIO: "bio", LOC: "loc", 0x80: "ext"}
KEYS = {name: bytes([i + 1]) * 32 for i, name in enumerate(NODE_OF.values())}


def test_decision_policy_exhaustive():
    txn = b"\x42" * 16
    checked = 0
    bad = []
    for roles in itertools.product(("req", "opt", "off"), repeat=len(UNIVERSE)):
        req = frozenset(f for f, r in zip(UNIVERSE, roles) if r == "req")
        opt = frozenset(f for f, r in zip(UNIVERSE, roles) if r == "opt")
        for q in range(len(opt) + 1):
            policy = DecisionPolicy(req, opt, q, deadline_ms=500)
            factors = sorted(policy.factors)
            for states in itertools.product((True, False, None), repeat=len(factors)):
                verdicts = {f: s for f, s in zip(factors, states) if s is not None}
                for deadline in (False, True):
                    # fresh table per probe: an early decision is final and would be returned again
                    table = PendingTable()
                    table.register(txn, "s", 0, None)
                    for f, ok in verdicts.items():
                        r = AuthResult(txn, f, "APPROVE" if ok else "DECLINE", "OK" if ok else "MISMATCH",
                                       NODE_OF[f], session="s")
                        collect_result(r.signed(KEYS[NODE_OF[f]]), table, KEYS, 10)
                    want = oracles.policy_outcome(req, opt, q, verdicts, deadline)
                    got = decide(txn, policy, table, 500, "s") if deadline else try_decide(txn, policy, table, 10, "s")
                    checked += 1
                    if want is None:
                        if got is not None:
                            bad.append((policy, verdicts, deadline, got.verdict))
                        continue
                    if got is None or got.verdict != want[0]:
                        bad.append((policy, verdicts, deadline, got and got.verdict))
                    elif want[0] == "DECLINE":
                        reason, factor = want[1]
                        if got.decline_reason != reason or (reason == "FACTOR_DECLINED" and got.decline_factor != factor):
                            bad.append((policy, verdicts, deadline, got.decline_reason))
    ok = record_criterion("decision policy", not bad,
                          f"{checked} (policy, verdict vector, deadline) cases match the enumeration oracle"
                          if not bad else str(bad[0]))
    assert ok, bad[:5]


def _verdicts(report):
    return [(r.verdict, r.reason, json.dumps(r.factors, sort_keys=True)) for r in report.rows]


def test_end_to_end():
    bad = []
    sim, tcp = run_scenario("happy_path"), run_scenario("happy_path", backend="tcp")
    if not (sim.passed and tcp.passed):
        bad.append("happy_path checks failed")
    if _verdicts(sim) != _verdicts(tcp) or [v for v, _, _ in _verdicts(sim)] != ["APPROVE"]:
        bad.append(f"sim {_verdicts(sim)} vs tcp {_verdicts(tcp)}")
    summary = []
    for kind in ATTACK_KINDS:
        report = run_scenario(f"attack_{kind}")
        attack_rows = [r for r in report.rows if r.attack]
        approved = sum(r.verdict == "APPROVE" for r in attack_rows)
        if not report.passed or not attack_rows or approved or attack_approvals(report.rows):
            bad.append(f"{kind}: {approved} approvals of {len(attack_rows)} attack transactions")
        honest = [r for r in report.rows if not r.attack]
        if kind != "replay" and honest:
            bad.append(f"{kind}: unexpected honest rows")
        summary.append(f"{kind} 0/{len(attack_rows)}")
    ok = record_criterion("end-to-end", not bad,
                          "happy_path APPROVE on sim and tcp; attack approvals " + ", ".join(summary)
                          if not bad else bad[0])
    assert ok, bad


def test_determinism():
    bad = []
    names = ["happy_path", "insufficient_funds", "extension_factor", "baseline"] + [f"attack_{k}" for k in ATTACK_KINDS]
    for name in names:
        doc = load_scenario(name)
        runs = []
        for _ in range(2):
            world = World(doc, 7)
            report = world.run()
            trace = json.dumps(world.net.sim.trace_json(), separators=(",", ":")).encode()
            frames = b"".join(s.encode() + d.encode() + f for s, d, f in world.net.sim.frames)
            runs.append((trace, frames, report.dumps().encode()))
        if runs[0] != runs[1]:
            bad.append(name)
        if not runs[0][0]:
            bad.append(f"{name}: empty trace")
    ok = record_criterion("determinism", not bad,
                          f"{len(names)} scenarios: byte-identical traces, frames and reports" if not bad else bad[0])
    assert ok, bad


def _mutate(rnd, data: bytes) -> bytes:
    data = bytearray(data)
    for _ in range(rnd.randint(1, 4)):
        choice = rnd.random()
        if choice < 0.4 and data:
            data[rnd.randrange(len(data))] ^= rnd.randint(1, 255)
        elif choice < 0.6 and data:
            del data[rnd.randrange(len(data)):]
        elif choice < 0.8:
            pos = rnd.randrange(len(data) + 1)
            data[pos:pos] = rnd.randbytes(rnd.randint(1, 8))
        elif len(data) > 3:
            i = rnd.randrange(len(data) - 2)
            data[i:i + 2] = rnd.choice([b"\xff\xff", b"\x00\x00", b"\x00\x01"])
    return bytes(data)


def test_parser_robustness():
    rnd = random.Random(8)
    b = Bench()
    seeds = [b.token(), b.token(factors=[FUND]), b.token(factors=[FUND, LOC])]
    frames = [encode_frame(t, json.dumps({"k": "v" * n}).encode()) for t, n in ((5, 3), (6, 40), (8, 0))]
    counts = defaultdict(int)
    crashes = []

    def probe(kind, fn, data):
        counts[kind] += 1
        try:
            fn(data)
        except MPayError:
            counts[f"{kind} typed error"] += 1
        except Exception as exc:  # anything untyped is a crash
            crashes.append((kind, data.hex(), repr(exc)))

    def frame_stream(data):
        for item in split_frames(bytearray(data)):
            if not isinstance(item, Exception):
                unpack_json(item[1])

    for n in range(60_000):
        if n % 3 == 0:
            data = rnd.randbytes(rnd.randint(0, 260))
        elif n % 3 == 1:
            data = seeds[n % len(seeds)][:rnd.randint(0, 200)]
        else:
            data = _mutate(rnd, seeds[n % len(seeds)])
        probe("token", codec.parse_payment_token, data)
        if n % 20 == 0:
            probe("fund entry", lambda d: codec.FundToken.decode(d[:83]), data)
    for n in range(45_000):
        base = frames[n % len(frames)]
        if n % 3 == 0:
            data = rnd.randbytes(rnd.randint(0, 40))
        elif n % 3 == 1:
            data = base[:rnd.randint(0, len(base))]
        else:
            data = _mutate(rnd, base)
        probe("frame", decode_frame, data)
        if n % 5 == 0:
            probe("stream", frame_stream, data)
    total = counts["token"] + counts["frame"] + counts["fund entry"] + counts["stream"]
    ok = record_criterion("parser robustness", not crashes and total >= 100_000,
                          f"{total} inputs, 0 crashes" if not crashes else f"{len(crashes)} crashes: {crashes[0]}")
    assert ok, crashes[:5]
