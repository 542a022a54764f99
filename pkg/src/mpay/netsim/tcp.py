"""Socket transport speaking the same frames as the simulator.

One listening socket per role plus one outgoing connection per remote
server. Reader threads only parse frames and push them onto a single inbox;
the dispatcher thread hands them to the role one at a time, so role state is
never touched concurrently.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import queue
import socket
import threading
import time

from ..errors import FrameError, TransportError
from .frames import encode_frame, frame_length, pack_json, split_frames

log = logging.getLogger(__name__)


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    """Blocking read of one frame. Unknown types are returned as-is for the caller to judge."""
    header = recv_exact(sock, 4)
    length = frame_length(header)
    body = recv_exact(sock, length)
    return body[0], body[1:]


def request(addr: str, msg_type: int, payload, expect: int, timeout: float = 5.0):
    """Open a connection, send one frame, and wait for a frame of type ``expect``."""
    if isinstance(payload, dict):
        payload = pack_json(payload)
    try:
        with socket.create_connection(parse_addr(addr), timeout=timeout) as sock:
            sock.sendall(encode_frame(msg_type, payload))
            deadline = time.monotonic() + timeout
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TransportError(f"timed out waiting for reply from {addr}")
                sock.settimeout(remaining)
                got_type, body = read_frame(sock)
                if got_type == expect:
                    return body
    except (OSError, ConnectionError) as exc:
        raise TransportError(f"{addr}: {exc}") from exc


class _Timer:
    __slots__ = ("when", "seq", "fn", "cancelled")

    def __init__(self, when, seq, fn):
        self.when, self.seq, self.fn, self.cancelled = when, seq, fn, False

    def __lt__(self, other):
        return (self.when, self.seq) < (other.when, other.seq)

    def cancel(self):
        self.cancelled = True


class TcpHost:
    """Hosts one role on a listening socket. Implements the role context interface."""

    def __init__(self, listen: str = "127.0.0.1:0", name: str = "", clock_offset_s: int = 0):
        self.name = name
        self.clock_offset_s = clock_offset_s
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind(parse_addr(listen))  # bind errors surface at startup
        self._server.listen(64)
        host, port = self._server.getsockname()[:2]
        self.address = f"{host}:{port}"
        self.role = None
        self.lock = threading.RLock()
        self._inbox: queue.Queue = queue.Queue()
        self._timers: list[_Timer] = []
        self._timer_seq = itertools.count()
        self._conn_ids = itertools.count(1)
        self._conns: dict[str, socket.socket] = {}
        self._conn_lock = threading.Lock()
        self._stopping = threading.Event()
        self._t0 = time.monotonic()
        self._threads: list[threading.Thread] = []
        self.send_failures = 0
        self.rejected_frames = 0

    # -- context interface ----------------------------------------------

    def now_ms(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)

    def clock(self) -> int:
        return int(time.time()) + self.clock_offset_s

    def call_later(self, delay_ms: int, fn) -> _Timer:
        timer = _Timer(time.monotonic() + delay_ms / 1000.0, next(self._timer_seq), fn)
        with self._conn_lock:
            heapq.heappush(self._timers, timer)
        self._inbox.put(None)  # wake dispatcher
        return timer

    def send(self, dst: str, msg_type: int, payload):
        if isinstance(payload, dict):
            payload = pack_json(payload)
        frame = encode_frame(msg_type, payload)
        try:
            sock = self._connection(dst)
            sock.sendall(frame)
        except (OSError, ValueError) as exc:
            self.send_failures += 1
            self._drop(dst)
            raise TransportError(f"send to {dst} failed: {exc}") from exc

    # -- lifecycle -------------------------------------------------------

    def start(self, role):
        self.role = role
        role.attach(self)
        for target in (self._accept_loop, self._dispatch_loop):
            th = threading.Thread(target=target, daemon=True, name=f"{self.name}-{target.__name__}")
            th.start()
            self._threads.append(th)
        return self

    def stop(self):
        self._stopping.set()
        self._inbox.put(None)
        try:
            self._server.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._server.close()
        except OSError:
            pass
        with self._conn_lock:
            conns = list(self._conns.values())
            self._conns.clear()
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        for th in self._threads:
            if th is not threading.current_thread():
                th.join(timeout=2)

    def inspect(self, fn):
        """Run ``fn(role)`` while holding the dispatcher lock."""
        with self.lock:
            return fn(self.role)

    # -- internals -------------------------------------------------------

    def _connection(self, dst: str) -> socket.socket:
        with self._conn_lock:
            sock = self._conns.get(dst)
        if sock is not None:
            return sock
        if dst.startswith("conn:"):
            raise TransportError(f"connection {dst} is closed")
        sock = socket.create_connection(parse_addr(dst), timeout=2.0)
        sock.settimeout(None)
        with self._conn_lock:
            existing = self._conns.get(dst)
            if existing is not None:
                sock.close()
                return existing
            self._conns[dst] = sock
        self._spawn_reader(sock, dst)
        return sock

    def _drop(self, key: str, only=None):
        with self._conn_lock:
            sock = self._conns.get(key)
            if sock is None or (only is not None and sock is not only):
                return
            del self._conns[key]
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def _spawn_reader(self, sock, peer):
        th = threading.Thread(target=self._read_loop, args=(sock, peer), daemon=True,
                              name=f"{self.name}-read-{peer}")
        th.start()

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            peer = f"conn:{next(self._conn_ids)}"
            with self._conn_lock:
                self._conns[peer] = sock
            self._spawn_reader(sock, peer)

    def _read_loop(self, sock, peer):
        buffer = bytearray()
        try:
            while not self._stopping.is_set():
                chunk = sock.recv(65536)
                if not chunk:
                    break
                buffer += chunk
                for item in split_frames(buffer):
                    if isinstance(item, FrameError):
                        self.rejected_frames += 1
                        log.warning("%s: rejected frame from %s: %s", self.name, peer, item)
                        continue
                    self._inbox.put((peer, item[0], item[1]))
        except FrameError as exc:
            log.warning("%s: closing %s: %s", self.name, peer, exc)
        except OSError:
            pass
        finally:
            self._drop(peer, only=sock)

    def _next_timeout(self):
        with self._conn_lock:
            while self._timers and self._timers[0].cancelled:
                heapq.heappop(self._timers)
            if not self._timers:
                return None
            return max(0.0, self._timers[0].when - time.monotonic())

    def _due_timers(self):
        now = time.monotonic()
        due = []
        with self._conn_lock:
            while self._timers and self._timers[0].when <= now:
                timer = heapq.heappop(self._timers)
                if not timer.cancelled:
                    due.append(timer)
        return due

    def _dispatch_loop(self):
        while not self._stopping.is_set():
            try:
                item = self._inbox.get(timeout=self._next_timeout())
            except queue.Empty:
                item = None
            for timer in self._due_timers():
                with self.lock:
                    self._safely(timer.fn)
            if item is None:
                continue
            src, msg_type, payload = item
            with self.lock:
                self._safely(self.role.on_message, src, msg_type, payload)

    def _safely(self, fn, *args):
        try:
            fn(*args)
        except Exception:  # a bad message must not kill the process
            log.exception("%s: handler failed", self.name)

