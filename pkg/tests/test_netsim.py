import struct

import pytest

from mpay.errors import FrameError, TransportError
from mpay.harness import run_scenario
from mpay.netsim.frames import (
    MAX_FRAME,
    MsgType,
    decode_frame,
    encode_frame,
    pack_json,
    split_frames,
    unpack_json,
)
from mpay.netsim.prng import Xoshiro256
from mpay.netsim.sim import EventQueue, HorizonExceeded, Link, LinkFaults, Simulator, sim_send
from mpay.roles import Role


# -- frames -------------------------------------------------------------

def test_frame_round_trip():
    frame = encode_frame(MsgType.DECISION, b"hello")
    assert frame[:4] == struct.pack(">I", 6) and frame[4] == 0x08
    assert decode_frame(frame) == (MsgType.DECISION, b"hello")


@pytest.mark.parametrize("data,code", [
    (b"\0\0", "TRUNCATED"),
    (b"\0\0\0\0", "SHORT"),
    (struct.pack(">I", MAX_FRAME + 1) + b"\x05", "OVERSIZE"),
    (struct.pack(">I", 10) + b"\x05abc", "TRUNCATED"),
    (encode_frame(5, b"x") + b"!", "TRAILING_BYTES"),
    (encode_frame(0x7F, b"x"), "UNKNOWN_TYPE"),
])
def test_frame_errors(data, code):
    with pytest.raises(FrameError) as exc:
        decode_frame(data)
    assert exc.value.code == code


def test_encode_rejects_bad_input():
    with pytest.raises(FrameError):
        encode_frame(256, b"")
    with pytest.raises(FrameError):
        encode_frame(5, bytes(MAX_FRAME))


def test_split_frames_keeps_stream_in_sync():
    buf = bytearray(encode_frame(5, b"a") + encode_frame(0x7F, b"zz") + encode_frame(6, b"b") + b"\0\0\0")
    out = list(split_frames(buf))
    assert out[0] == (5, b"a") and out[2] == (6, b"b")
    assert isinstance(out[1], FrameError) and out[1].code == "UNKNOWN_TYPE"
    assert buf == bytearray(b"\0\0\0")


def test_json_payloads():
    assert unpack_json(pack_json({"b": 1, "a": [2]})) == {"a": [2], "b": 1}
    assert pack_json({"b": 1, "a": 2}) == b'{"a":2,"b":1}'
    for bad in (b"\xff", b"[1]", b"{"):
        with pytest.raises(FrameError):
            unpack_json(bad)


# -- prng ---------------------------------------------------------------

def test_xoshiro_reference_outputs():
    rng = Xoshiro256([1, 2, 3, 4])
    assert [rng.next_u64() for _ in range(4)] == [11520, 0, 1509978240, 1215971899390074240]


def test_xoshiro_rejects_zero_state():
    with pytest.raises(ValueError):
        Xoshiro256([0, 0, 0, 0])


def test_substreams_independent_and_reproducible():
    a = [Xoshiro256.from_seed(7, "a").next_u64() for _ in range(3)]
    assert a == [Xoshiro256.from_seed(7, "a").next_u64() for _ in range(3)]
    assert Xoshiro256.from_seed(7, "a").next_u64() != Xoshiro256.from_seed(7, "b").next_u64()
    assert Xoshiro256.from_seed(7, "a").next_u64() != Xoshiro256.from_seed(8, "a").next_u64()


def test_randint_bounds():
    rng = Xoshiro256.from_seed(0)
    seen = {rng.randint(3, 5) for _ in range(500)}
    assert seen == {3, 4, 5}
    assert len(rng.randbytes(13)) == 13
    with pytest.raises(ValueError):
        rng.randint(2, 1)


# -- simulator ----------------------------------------------------------

class Echo(Role):
    """Records deliveries; replies once to anything from ``ping``."""

    def __init__(self, name):
        super().__init__(name)
        self.got = []

    def on_message(self, src, msg_type, payload):
        self.got.append((self.ctx.now_ms(), src, msg_type, payload))
        if src == "ping":
            self.ctx.send(src, MsgType.DECISION, b"pong")


def _pair(seed=0, faults=None):
    sim = Simulator(seed, faults)
    ping, pong = sim.add_role(Echo("ping")), sim.add_role(Echo("pong"))
    return sim, ping, pong


def test_latency_and_reply():
    sim, ping, pong = _pair(faults=LinkFaults(base_latency_ms=7))
    sim.send("ping", "pong", MsgType.PAYMENT_SUBMIT, b"x")
    sim.run_until_idle()
    assert pong.got == [(7, "ping", MsgType.PAYMENT_SUBMIT, b"x")]
    assert ping.got[0][0] == 14
    assert [e.to_json() for e in sim.trace] == [[7, "ping", "pong", 5], [14, "pong", "ping", 8]]


def test_drop_and_dup_counts():
    sim, _, pong = _pair(faults=LinkFaults(drop_prob=1.0))
    for _ in range(10):
        sim.send("ping", "pong", 5, b"")
    sim.run_until_idle()
    assert sim.dropped == 10 and pong.got == []
    sim, _, pong = _pair(faults=LinkFaults(dup_prob=1.0))
    sim.set_faults("pong", "*", LinkFaults(drop_prob=1.0))
    for _ in range(10):
        sim.send("ping", "pong", 5, b"")
    sim.run_until_idle()
    assert len(pong.got) == 20


def test_drop_rate_roughly_matches():
    queue = EventQueue()
    link = Link("a", "b", LinkFaults(drop_prob=0.3), Xoshiro256.from_seed(1, "l"))
    delivered = sum(bool(sim_send(link, b"", queue)) for _ in range(5000))
    assert 3300 < delivered < 3700


def test_fault_rule_globs_later_wins():
    sim, _, _ = _pair()
    sim.set_faults("*", "*", LinkFaults(base_latency_ms=1))
    sim.set_faults("pi*", "po*", LinkFaults(base_latency_ms=9))
    assert sim.link("ping", "pong").faults.base_latency_ms == 9
    assert sim.link("pong", "ping").faults.base_latency_ms == 1


def test_timers_and_clock():
    sim = Simulator(epoch=1000)
    fired = []
    sim.call_later("x", 2500, lambda: fired.append(sim.queue.now))
    sim.advance(2000)
    assert fired == [] and sim.queue.now == 2000
    sim.run_until_idle()
    assert fired == [2500]
    role = sim.add_role(Echo("r"))
    assert role.ctx.clock() == 1002


def test_horizon_reports_pending():
    sim = Simulator()
    sim.call_later("x", 10_000, lambda: None)
    with pytest.raises(HorizonExceeded) as exc:
        sim.run_until_idle(horizon_ms=100)
    assert "t=10000 timer" in str(exc.value)


def test_empty_sim_has_empty_trace():
    sim = Simulator()
    assert sim.run_until_idle() == [] and sim.trace_json() == []


def test_unknown_destination():
    sim, _, _ = _pair()
    with pytest.raises(TransportError):
        sim.send("ping", "nobody", 5, b"")


def test_unknown_frame_type_rejected_not_delivered():
    sim, _, pong = _pair()
    sim.send("ping", "pong", 0x7F, b"")
    sim.run_until_idle()
    assert pong.got == [] and sim.rejected_frames == 1


def test_jittered_runs_are_deterministic():
    def run(seed):
        sim, _, pong = _pair(seed, LinkFaults(jitter_ms=50, dup_prob=0.5, drop_prob=0.2))
        for i in range(50):
            sim.send("ping", "pong", 5, bytes([i]))
        sim.run_until_idle()
        return sim.trace_json(), [(t, p) for t, _, _, p in pong.got]
    assert run(4) == run(4)
    assert run(4) != run(5)


def test_happy_path_same_decision_across_seeds():
    verdicts = {tuple((r.verdict, r.reason) for r in run_scenario("happy_path", seed=s).rows) for s in range(20)}
    assert verdicts == {(("APPROVE", ""),)}
