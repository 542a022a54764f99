"""Single-threaded discrete-event transport.

Virtual time is an integer number of milliseconds and only moves when an
event is popped. Every link owns its own PRNG substream, so faults on one
link never perturb another's samples.
"""

from __future__ import annotations

import fnmatch
import heapq
import logging
from dataclasses import dataclass, field

from ..errors import FrameError, MPayError, TransportError
from .frames import decode_frame, encode_frame, pack_json
from .prng import Xoshiro256

log = logging.getLogger(__name__)

DEFAULT_EPOCH = 1_700_000_000


@dataclass(frozen=True)
class LinkFaults:
    base_latency_ms: int = 5
    jitter_ms: int = 0
    drop_prob: float = 0.0
    dup_prob: float = 0.0
    reorder_ms: int = 0

    def __post_init__(self):
        for name in ("drop_prob", "dup_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for name in ("base_latency_ms", "jitter_ms", "reorder_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class Link:
    src: str
    dst: str
    faults: LinkFaults
    rng: Xoshiro256


@dataclass(order=True)
class Event:
    time: int
    seq: int
    kind: str = field(compare=False)
    src: str = field(compare=False, default="")
    dst: str = field(compare=False, default="")
    frame: bytes = field(compare=False, default=b"")
    callback: object = field(compare=False, default=None)
    cancelled: bool = field(compare=False, default=False)

    def cancel(self):
        self.cancelled = True


class EventQueue:
    def __init__(self):
        self.now = 0
        self._heap: list[Event] = []
        self._seq = 0

    def push(self, time: int, kind: str, **kw) -> Event:
        ev = Event(time, self._seq, kind, **kw)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> Event:
        ev = heapq.heappop(self._heap)
        self.now = max(self.now, ev.time)
        return ev

    def peek_time(self):
        while self._heap and self._heap[0].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0].time if self._heap else None

    def pending(self) -> list[Event]:
        return sorted(e for e in self._heap if not e.cancelled)

    def __len__(self):
        return sum(1 for e in self._heap if not e.cancelled)


def sim_send(link: Link, frame: bytes, queue: EventQueue, rng: Xoshiro256 | None = None) -> list[Event]:
    """Schedule 0 (dropped), 1, or 2 (duplicated) deliveries of ``frame``.

    Draw order is fixed: drop, duplicate, then one delay per copy.
    """
    rng = rng or link.rng
    f = link.faults
    if rng.random() < f.drop_prob:
        return []
    copies = 2 if rng.random() < f.dup_prob else 1
    events = []
    for _ in range(copies):
        delay = f.base_latency_ms
        if f.jitter_ms:
            delay += rng.randint(0, f.jitter_ms)
        if f.reorder_ms:
            delay += rng.randint(0, f.reorder_ms)
        events.append(queue.push(queue.now + delay, "deliver", src=link.src, dst=link.dst, frame=frame))
    return events


class HorizonExceeded(MPayError):
    def __init__(self, pending):
        self.pending = pending
        lines = [f"  t={e.time} {e.kind} {e.src}->{e.dst}" for e in pending[:20]]
        super().__init__("simulation horizon exceeded; undelivered events:\n" + "\n".join(lines))


class SimContext:
    """What a role sees of the simulator."""

    def __init__(self, sim: "Simulator", name: str):
        self.sim = sim
        self.name = name

    def send(self, dst: str, msg_type: int, payload):
        if isinstance(payload, dict):
            payload = pack_json(payload)
        self.sim.send(self.name, dst, msg_type, payload)

    def call_later(self, delay_ms: int, fn):
        return self.sim.call_later(self.name, delay_ms, fn)

    def now_ms(self) -> int:
        return self.sim.queue.now

    def clock(self) -> int:
        return self.sim.epoch + self.sim.queue.now // 1000


@dataclass(frozen=True)
class TraceEntry:
    time: int
    src: str
    dst: str
    msg_type: int

    def to_json(self):
        return [self.time, self.src, self.dst, self.msg_type]


class Simulator:
    def __init__(self, seed: int = 0, default_faults: LinkFaults | None = None,
                 epoch: int = DEFAULT_EPOCH, record_frames: bool = False):
        self.seed = seed
        self.record_frames = record_frames
        self.frames: list[tuple[str, str, bytes]] = []
        self.epoch = epoch
        self.default_faults = default_faults or LinkFaults()
        self.queue = EventQueue()
        self.roles: dict[str, object] = {}
        self.links: dict[tuple[str, str], Link] = {}
        self._fault_rules: list[tuple[str, str, LinkFaults]] = []
        self.trace: list[TraceEntry] = []
        self.dropped = 0
        self.rejected_frames = 0

    def add_role(self, role, name: str | None = None):
        name = name or role.name
        if name in self.roles:
            raise ValueError(f"duplicate role {name}")
        self.roles[name] = role
        role.attach(SimContext(self, name))
        return role

    def set_faults(self, src_pattern: str, dst_pattern: str, faults: LinkFaults):
        """Later rules win. Patterns are shell-style globs over role names."""
        self._fault_rules.append((src_pattern, dst_pattern, faults))
        for (src, dst), link in self.links.items():
            link.faults = self._faults_for(src, dst)

    def _faults_for(self, src, dst) -> LinkFaults:
        faults = self.default_faults
        for sp, dp, f in self._fault_rules:
            if fnmatch.fnmatchcase(src, sp) and fnmatch.fnmatchcase(dst, dp):
                faults = f
        return faults

    def link(self, src: str, dst: str) -> Link:
        key = (src, dst)
        if key not in self.links:
            rng = Xoshiro256.from_seed(self.seed, f"link:{src}->{dst}")
            self.links[key] = Link(src, dst, self._faults_for(src, dst), rng)
        return self.links[key]

    def send(self, src: str, dst: str, msg_type: int, payload: bytes):
        if dst not in self.roles:
            raise TransportError(f"no route from {src} to {dst}")
        frame = encode_frame(msg_type, payload)
        if self.record_frames:
            self.frames.append((src, dst, frame))
        events = sim_send(self.link(src, dst), frame, self.queue)
        if not events:
            self.dropped += 1

    def call_later(self, role_name: str, delay_ms: int, fn) -> Event:
        return self.queue.push(self.queue.now + max(0, int(delay_ms)), "timer", dst=role_name, callback=fn)

    def _dispatch(self, ev: Event):
        if ev.kind == "timer":
            ev.callback()
            return
        try:
            msg_type, payload = decode_frame(ev.frame)
        except FrameError as exc:
            self.rejected_frames += 1
            log.debug("rejected frame %s->%s: %s", ev.src, ev.dst, exc)
            return
        self.trace.append(TraceEntry(ev.time, ev.src, ev.dst, msg_type))
        self.roles[ev.dst].on_message(ev.src, msg_type, payload)

    def step(self) -> bool:
        if self.queue.peek_time() is None:
            return False
        self._dispatch(self.queue.pop())
        return True

    def run_until_idle(self, horizon_ms: int | None = None) -> list[TraceEntry]:
        """Process events in (time, seq) order; returns the trace entries produced."""
        start = len(self.trace)
        limit = None if horizon_ms is None else self.queue.now + horizon_ms
        while True:
            t = self.queue.peek_time()
            if t is None:
                break
            if limit is not None and t > limit:
                raise HorizonExceeded(self.queue.pending())
            self._dispatch(self.queue.pop())
        return self.trace[start:]

    def advance(self, ms: int):
        """Run everything due within ``ms`` and move the clock forward by exactly that much."""
        target = self.queue.now + ms
        while True:
            t = self.queue.peek_time()
            if t is None or t > target:
                break
            self._dispatch(self.queue.pop())
        self.queue.now = target

    def trace_json(self) -> list:
        return [e.to_json() for e in self.trace]
