"""Message handlers that put each party on a transport.

A role only talks to its context: ``send(dst, type, payload)``,
``call_later(ms, fn)``, ``now_ms()`` and ``clock()``. The simulator and
the socket host both provide that interface, so the same role objects run
in either backend.
"""

from __future__ import annotations

import json
import logging
from dataclasses import replace

from . import codec
from .card_network import CardNetwork, Decision, collect_result, try_decide
from .errors import EnrollmentError, FrameError, MPayError, ProvisioningError
from .netsim.frames import MsgType, unpack_json
from .nodes import AuthNode, AuthResult, LocNode
from .pos import DEFAULT_MARGIN_MS, PosSession, SessionState, fan_out, receive_tap
from .wallet import Wallet

log = logging.getLogger(__name__)


class Role:
    name = "role"

    def __init__(self, name: str | None = None):
        if name:
            self.name = name
        self.ctx = None
        self.on_change = None  # persistence hook

    def attach(self, ctx):
        self.ctx = ctx

    def changed(self):
        if self.on_change is not None:
            self.on_change(self)

    def on_message(self, src: str, msg_type: int, payload: bytes):
        handler = self.handlers().get(msg_type)
        if handler is None:
            log.debug("%s ignores message type %#04x from %s", self.name, msg_type, src)
            return
        try:
            obj = unpack_json(payload)
        except FrameError as exc:
            log.info("%s: bad payload from %s: %s", self.name, src, exc)
            return
        handler(src, obj)

    def handlers(self) -> dict:
        return {}

    def _try_send(self, dst, msg_type, payload) -> bool:
        try:
            self.ctx.send(dst, msg_type, payload)
            return True
        except MPayError as exc:
            log.warning("%s: send to %s failed: %s", self.name, dst, exc)
            return False


class NodeRole(Role):
    def __init__(self, node: AuthNode, network_addr: str, name: str | None = None):
        super().__init__(name or node.node_id)
        self.node = node
        self.network_addr = network_addr
        self.results: list[AuthResult] = []

    def handlers(self):
        out = {MsgType.PAYMENT_SUBMIT: self._submit, MsgType.ENROLL_REQ: self._enroll}
        if isinstance(self.node, LocNode):
            out[MsgType.LOCATION_FIX] = self._fix
        return out

    def _submit(self, src, obj):
        try:
            token_bytes = bytes.fromhex(obj["token"])
        except (KeyError, ValueError, TypeError):
            log.info("%s: submit without a token", self.name)
            return
        result = self.node.handle_submit(token_bytes, self.ctx.clock(), str(obj.get("session", "")))
        self.results.append(result)
        self.changed()
        self._try_send(self.network_addr, MsgType.AUTH_RESULT, result.to_json())

    def _enroll(self, src, obj):
        factor = obj.get("factor")
        try:
            wallet_id = bytes.fromhex(obj["wallet_id"])
            if len(wallet_id) != codec.WALLET_ID_LEN:
                raise ValueError("wallet_id must be 16 bytes")
            secret = self.node.enroll(wallet_id, int(factor), obj.get("material") or {})
        except EnrollmentError as exc:
            resp = {"ok": False, "factor": factor, "error": exc.code}
        except (KeyError, ValueError, TypeError) as exc:
            resp = {"ok": False, "factor": factor, "error": "BAD_REQUEST", "detail": str(exc)}
        else:
            resp = {"ok": True, "factor": factor, "secret": secret.hex() if secret is not None else None}
            self.changed()
        self._try_send(src, MsgType.ENROLL_RESP, resp)

    def _fix(self, src, obj):
        try:
            cell = codec.GeoCell(int(obj["lat_cell"]), int(obj["lon_cell"]))
            self.node.ingest_fix(str(obj["device_id"]), cell, int(obj["t"]))
        except (KeyError, ValueError, TypeError) as exc:
            log.info("%s: rejected location fix: %s", self.name, exc)
            return
        self.changed()


class NetworkRole(Role):
    name = "network"

    def __init__(self, network: CardNetwork, name: str | None = None):
        super().__init__(name)
        self.network = network
        self.reply_to: dict[tuple[bytes, str], str] = {}
        self.timers: dict[tuple[bytes, str], object] = {}
        self.decisions: list[Decision] = []

    def handlers(self):
        return {
            MsgType.PROVISION_REQ: self._provision,
            MsgType.BASELINE_VALIDATE_REQ: self._baseline,
            MsgType.TXN_REGISTER: self._register,
            MsgType.AUTH_RESULT: self._result,
        }

    def _provision(self, src, obj):
        try:
            wallet_id = bytes.fromhex(obj["wallet_id"])
            if len(wallet_id) != codec.WALLET_ID_LEN:
                raise ValueError("wallet_id must be 16 bytes")
            ot = self.network.provision(str(obj["pan"]), wallet_id)
        except ProvisioningError as exc:
            resp = {"ok": False, "error": exc.code}
        except (KeyError, ValueError, TypeError):
            resp = {"ok": False, "error": "BAD_REQUEST"}
        else:
            resp = {"ok": True, "ot": ot.hex()}
            self.changed()
        self._try_send(src, MsgType.PROVISION_RESP, resp)

    def _baseline(self, src, obj):
        session = obj.get("session", "")
        try:
            valid = self.network.validate_baseline(
                bytes.fromhex(obj["ottc"]), bytes.fromhex(obj["wallet_id"]), int(obj["t"]), self.ctx.clock())
            resp = {"session": session, "valid": bool(valid)}
        except ProvisioningError as exc:
            resp = {"session": session, "valid": False, "error": exc.code}
        except (KeyError, ValueError, TypeError):
            resp = {"session": session, "valid": False, "error": "BAD_REQUEST"}
        self._try_send(src, MsgType.BASELINE_VALIDATE_RESP, resp)

    def _register(self, src, obj):
        try:
            txn = bytes.fromhex(obj["txn_id"])
            session = str(obj.get("session", ""))
            factors = [int(f) for f in obj.get("factors", [])]
        except (KeyError, ValueError, TypeError):
            return
        key = (txn, session)
        if not self.network.table.register(txn, session, self.ctx.now_ms(), factors):
            return
        self.reply_to[key] = src
        self.timers[key] = self.ctx.call_later(self.network.policy.deadline_ms, lambda: self._settle(key))
        self._settle(key)

    def _result(self, src, obj):
        try:
            result = AuthResult.from_json(obj)
        except (KeyError, ValueError, TypeError):
            self.network.table.forged += 1
            return
        if collect_result(result, self.network.table, self.network.node_keys, self.ctx.now_ms()):
            key = (result.txn_id, result.session)
            if key in self.reply_to:
                self._settle(key)

    def _settle(self, key):
        pending = self.network.table.get(*key)
        if pending is None or pending.decision is not None:
            return
        decision = try_decide(key[0], self.network.policy, self.network.table, self.ctx.now_ms(), key[1])
        if decision is None:
            return
        timer = self.timers.pop(key, None)
        if timer is not None:
            timer.cancel()
        self.decisions.append(decision)
        self._try_send(self.reply_to[key], MsgType.DECISION, decision.to_json())


class PosRole(Role):
    name = "pos"

    def __init__(self, network_addr: str, directory, *, deadline_ms: int = 500,
                 margin_ms: int = DEFAULT_MARGIN_MS, name: str | None = None, receipts=None):
        super().__init__(name)
        self.network_addr = network_addr
        self.directory = list(directory)
        self.timeout_ms = deadline_ms + margin_ms
        self.sessions: dict[str, object] = {}
        self.tapper: dict[str, str] = {}
        self.receipts = receipts if receipts is not None else []
        self._timers: dict[str, object] = {}
        self._counter = 0
        self.forwarded: list[tuple[str, bytes]] = []  # (dst, token bytes) as sent

    def handlers(self):
        return {
            MsgType.PAYMENT_SUBMIT: self._tap,
            MsgType.DECISION: self._decision,
            MsgType.BASELINE_VALIDATE_RESP: self._baseline_resp,
        }

    def _next_session(self) -> str:
        self._counter += 1
        return f"{self.name}-{self._counter}"

    def _send_dict(self, dst, msg_type, payload):
        if msg_type == MsgType.PAYMENT_SUBMIT:
            self.forwarded.append((dst, bytes.fromhex(payload["token"])))
        self.ctx.send(dst, msg_type, payload)

    def _tap(self, src, obj):
        if "baseline" in obj:
            self._baseline_tap(src, obj["baseline"])
            return
        sid = self._next_session()
        try:
            data = bytes.fromhex(obj["token"])
        except (KeyError, ValueError, TypeError):
            data = b""
        session = receive_tap(data, sid, self.ctx.now_ms())
        self.sessions[sid] = session
        self.tapper[sid] = src
        if session.state == SessionState.FAILED:
            self._finish(session)
            return
        fan_out(session, self.directory, self._send_dict, self.network_addr, pos_name=self.name)
        self._timers[sid] = self.ctx.call_later(self.timeout_ms, lambda: self._timeout(sid))

    def _timeout(self, sid):
        session = self.sessions[sid]
        if session.terminal:
            return
        session.transition(SessionState.FAILED, "NO_DECISION")
        self._finish(session)

    def _decision(self, src, obj):
        sid = obj.get("session", "")
        session = self.sessions.get(sid)
        if session is None or session.terminal:
            return
        try:
            decision = Decision.from_json(obj)
        except (KeyError, ValueError, TypeError):
            return
        if session.txn_id is None or decision.txn_id != session.txn_id:
            log.info("%s: ignoring decision for another transaction", self.name)
            return
        session.decision = decision
        session.transition(SessionState.DECIDED, decision.summary or None)
        self._finish(session)

    def _finish(self, session):
        session.decided_at_ms = self.ctx.now_ms()
        timer = self._timers.pop(session.session_id, None)
        if timer is not None:
            timer.cancel()
        receipt = self.receipt(session)
        self.receipts.append(receipt)
        self.changed()
        self._try_send(self.tapper[session.session_id], MsgType.DECISION, receipt)

    def receipt(self, session) -> dict:
        if session.decision is not None:
            body = session.decision.to_json()
        else:
            body = {
                "txn_id": session.txn_id.hex() if session.txn_id else "",
                "session": session.session_id,
                "verdict": "DECLINE",
                "contributing": [],
                "decline_reason": session.reason,
                "decline_factor": None,
                "summary": session.reason,
            }
        body["pos_state"] = session.state.value
        body["latency_ms"] = (session.decided_at_ms or 0) - session.tapped_at_ms
        return body

    # legacy single-code flow
    def _baseline_tap(self, src, req):
        sid = self._next_session()
        session = PosSession(sid, b"", tapped_at_ms=self.ctx.now_ms())
        try:
            session.txn_id = codec.txn_id(bytes.fromhex(req["ottc"]) + bytes.fromhex(req["wallet_id"]))
        except (KeyError, ValueError, TypeError):
            session.transition(SessionState.FAILED, "MALFORMED")
        self.sessions[sid] = session
        self.tapper[sid] = src
        if session.state == SessionState.FAILED:
            self._finish(session)
            return
        self._try_send(self.network_addr, MsgType.BASELINE_VALIDATE_REQ, {**req, "session": sid})
        session.transition(SessionState.FANNED_OUT)
        self._timers[sid] = self.ctx.call_later(self.timeout_ms, lambda: self._timeout(sid))

    def _baseline_resp(self, src, obj):
        session = self.sessions.get(obj.get("session", ""))
        if session is None or session.terminal:
            return
        valid = bool(obj.get("valid"))
        session.decision = Decision(
            session.txn_id, "APPROVE" if valid else "DECLINE",
            decline_reason=None if valid else "BASELINE_INVALID", session=session.session_id)
        session.transition(SessionState.DECIDED, None if valid else "BASELINE_INVALID")
        self._finish(session)


class WalletRole(Role):
    """Drives a :class:`Wallet` over the transport.

    ``node_addrs`` maps factor tag to node address. Decisions relayed by the
    POS land in ``decisions``.
    """

    def __init__(self, wallet: Wallet, *, network_addr: str, node_addrs: dict, pos_addr: str,
                 name: str = "wallet"):
        super().__init__(name)
        self.wallet = wallet
        self.network_addr = network_addr
        self.node_addrs = dict(node_addrs)
        self.pos_addr = pos_addr
        self.errors: list[str] = []
        self.decisions: list[dict] = []
        self.tapped: list[bytes] = []
        self._operators: dict[str, list] = {}
        self._enroll_queue: list[int] = []
        self.home_cell: codec.GeoCell | None = None

    def attach(self, ctx):
        super().attach(ctx)
        self.wallet.clock = ctx.clock

    def handlers(self):
        return {
            MsgType.PROVISION_RESP: self._provisioned,
            MsgType.ENROLL_RESP: self._enrolled,
            MsgType.DECISION: self._decision,
            MsgType.PAYMENT_SUBMIT: self._operator_pay,
        }

    # -- enrollment ------------------------------------------------------

    def begin_enrollment(self, pan: str, factors=None):
        """Provision the card, then enroll each factor in turn."""
        self.wallet.check_pan(pan)
        self.wallet.state.pan = pan
        self._enroll_queue = sorted(factors if factors is not None else self.node_addrs)
        if self.wallet.state.ot is None:
            self._try_send(self.network_addr, MsgType.PROVISION_REQ,
                           {"pan": pan, "wallet_id": self.wallet.wallet_id.hex()})
        else:
            self._enroll_next()

    def _provisioned(self, src, obj):
        if not obj.get("ok"):
            self.errors.append(f"provision:{obj.get('error')}")
            return
        self.wallet.accept_ot(bytes.fromhex(obj["ot"]))
        self.changed()
        self._enroll_next()

    def _enroll_next(self):
        while self._enroll_queue:
            tag = self._enroll_queue.pop(0)
            if tag in self.wallet.state.registered:
                continue
            try:
                material = self.wallet.enrollment_material(tag)
            except EnrollmentError as exc:
                self.errors.append(f"enroll:{codec.factor_name(tag)}:{exc.code}")
                continue
            self._try_send(self.node_addrs[tag], MsgType.ENROLL_REQ,
                           {"wallet_id": self.wallet.wallet_id.hex(), "factor": tag, "material": material})
            return

    def _enrolled(self, src, obj):
        tag = obj.get("factor")
        if not obj.get("ok"):
            self.errors.append(f"enroll:{codec.factor_name(int(tag)) if tag is not None else '?'}:{obj.get('error')}")
        else:
            secret = bytes.fromhex(obj["secret"]) if obj.get("secret") else None
            try:
                self.wallet.accept_enrollment(int(tag), secret)
                self.changed()
            except EnrollmentError as exc:
                self.errors.append(f"enroll:{exc.code}")
        self._enroll_next()

    @property
    def enrolled(self) -> bool:
        return self.wallet.state.ot is not None and set(self.node_addrs) <= self.wallet.state.registered

    # -- device location feed ---------------------------------------------

    def send_fix(self, cell: codec.GeoCell, t: int | None = None):
        loc = self.node_addrs.get(codec.LOC)
        if loc is None:
            return False
        return self._try_send(loc, MsgType.LOCATION_FIX, {
            "device_id": self.wallet.state.device_id,
            "lat_cell": cell.lat_cell,
            "lon_cell": cell.lon_cell,
            "t": self.wallet.clock() if t is None else t,
        })

    # -- payments ------------------------------------------------------

    def tap(self, token: bytes):
        self.tapped.append(token)
        return self._try_send(self.pos_addr, MsgType.PAYMENT_SUBMIT, {"token": token.hex()})

    def pay(self, amount: codec.AmountMinor, *, biometric=None, cell=None, factors=None) -> bytes:
        token = self.wallet.initiate_payment(self.wallet.capture(amount, biometric, cell), factors)
        self.tap(token)
        return token

    def tap_baseline(self, t: int | None = None):
        ottc, t = self.wallet.baseline_ottc(t)
        return self._try_send(self.pos_addr, MsgType.PAYMENT_SUBMIT, {"baseline": {
            "ottc": ottc.hex(), "wallet_id": self.wallet.wallet_id.hex(), "t": t}})

    def _decision(self, src, obj):
        self.decisions.append(obj)
        waiting = self._operators.get(obj.get("txn_id", ""))
        if waiting:
            self._try_send(waiting.pop(0), MsgType.DECISION, obj)

    def _operator_pay(self, src, obj):
        """A local operator (the ``pay`` command) asks this wallet to pay."""
        capture = obj.get("capture")
        if not isinstance(capture, dict):
            return
        try:
            amount = codec.AmountMinor(int(capture["amount"]), str(capture.get("currency", "USD")))
            cell = capture.get("cell")
            cell = codec.GeoCell(int(cell[0]), int(cell[1])) if cell is not None else self.home_cell
            biometric = bytes.fromhex(capture["biometric"]) if capture.get("biometric") else None
            if capture.get("send_fix", True) and cell is not None:
                self.send_fix(self.home_cell or cell)
            token = self.pay(amount, biometric=biometric, cell=cell)
        except (MPayError, KeyError, ValueError, TypeError) as exc:
            self._try_send(src, MsgType.DECISION, {
                "verdict": "DECLINE", "decline_reason": "WALLET_ERROR", "summary": str(exc),
                "txn_id": "", "session": "", "contributing": []})
            return
        self._operators.setdefault(codec.txn_id(token).hex(), []).append(src)


class Injector(Role):
    """Sends arbitrary bytes: used by the harness to impersonate an attacker."""

    name = "attacker"

    def __init__(self, name: str | None = None):
        super().__init__(name)
        self.received: list[dict] = []

    def on_message(self, src, msg_type, payload):
        try:
            self.received.append({"type": msg_type, **json.loads(payload)})
        except (ValueError, TypeError):
            self.received.append({"type": msg_type})

    def tap(self, pos_addr: str, token: bytes):
        return self._try_send(pos_addr, MsgType.PAYMENT_SUBMIT, {"token": token.hex()})

    def forge_result(self, network_addr: str, result: AuthResult):
        forged = replace(result, result_mac=bytes(32))
        return self._try_send(network_addr, MsgType.AUTH_RESULT, forged.to_json())
