"""Point-of-sale sessions.

The POS parses the tapped token only far enough to route it. It holds no
secrets and forwards the tapped bytes unchanged.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

from . import codec
from .errors import MPayError, TokenFormatError

log = logging.getLogger(__name__)

NFC_MTU = 4096
DEFAULT_MARGIN_MS = 200


class SessionState(str, enum.Enum):
    AWAITING_TAP = "AWAITING_TAP"
    FANNED_OUT = "FANNED_OUT"
    DECIDED = "DECIDED"
    FAILED = "FAILED"


_ALLOWED = {
    SessionState.AWAITING_TAP: {SessionState.FANNED_OUT, SessionState.FAILED},
    SessionState.FANNED_OUT: {SessionState.DECIDED, SessionState.FAILED},
    SessionState.DECIDED: set(),
    SessionState.FAILED: set(),
}


class SessionStateError(MPayError):
    pass


@dataclass
class PosSession:
    session_id: str
    token_bytes: bytes
    txn_id: bytes | None = None
    token: codec.PaymentToken | None = None
    state: SessionState = SessionState.AWAITING_TAP
    reason: str | None = None
    decision: object = None
    tapped_at_ms: int = 0
    decided_at_ms: int | None = None
    submits: list = field(default_factory=list)  # (factor, addr)
    send_failures: list = field(default_factory=list)
    registered: bool = False

    @property
    def terminal(self) -> bool:
        return self.state in (SessionState.DECIDED, SessionState.FAILED)

    def transition(self, new: SessionState, reason: str | None = None):
        if new not in _ALLOWED[self.state]:
            raise SessionStateError(f"{self.state.value} -> {new.value} not allowed")
        self.state = new
        if reason is not None:
            self.reason = reason


def receive_tap(data: bytes, session_id: str = "", now_ms: int = 0) -> PosSession:
    data = bytes(data)
    session = PosSession(session_id, data, tapped_at_ms=now_ms)
    if len(data) > NFC_MTU:
        session.transition(SessionState.FAILED, "MALFORMED")
        return session
    try:
        session.token = codec.parse_payment_token(data)
    except TokenFormatError as exc:
        log.info("tap rejected: %s", exc)
        session.transition(SessionState.FAILED, "MALFORMED")
        return session
    session.txn_id = codec.txn_id(data)
    return session


def directory_from_json(entries) -> list[tuple[int, str]]:
    """``[{"factor": "FUND", "addr": "..."}]`` -> ``[(tag, addr)]``."""
    return [(codec.factor_tag(e["factor"]), str(e["addr"])) for e in entries]


def fan_out(session: PosSession, directory, send, network_addr: str, *, pos_name: str = "") -> PosSession:
    """Submit the token to every node whose factor is present, then register with the network.

    ``send(dst, msg_type, payload_dict)`` may raise; failures are recorded and
    the session still proceeds, so unreachable nodes surface as a timeout.
    """
    from .netsim.frames import MsgType

    if session.token is None:
        raise SessionStateError("session holds no parsed token")
    present = set(session.token.tags)
    payload = {"token": session.token_bytes.hex(), "session": session.session_id}
    for tag, addr in directory:
        if tag not in present:
            continue
        session.submits.append((tag, addr))
        try:
            send(addr, MsgType.PAYMENT_SUBMIT, payload)
        except MPayError as exc:
            session.send_failures.append((tag, addr, str(exc)))
    register = {
        "txn_id": session.txn_id.hex(),
        "session": session.session_id,
        "factors": sorted(present),
        "pos": pos_name,
    }
    try:
        send(network_addr, MsgType.TXN_REGISTER, register)
    except MPayError as exc:
        session.send_failures.append((None, network_addr, str(exc)))
    session.registered = True
    session.transition(SessionState.FANNED_OUT)
    return session
