"""Length-prefixed frames.

Layout::

    [4 bytes  length of type+payload, big-endian]
    [1 byte   message type]
    [N bytes  payload]
"""

import enum
import json
import struct

from ..errors import FrameError

MAX_FRAME = 1 << 20  # counts type byte + payload
HEADER_SIZE = 5


class MsgType(enum.IntEnum):
    PROVISION_REQ = 0x01
    PROVISION_RESP = 0x02
    ENROLL_REQ = 0x03
    ENROLL_RESP = 0x04
    PAYMENT_SUBMIT = 0x05
    AUTH_RESULT = 0x06
    TXN_REGISTER = 0x07
    DECISION = 0x08
    BASELINE_VALIDATE_REQ = 0x09
    BASELINE_VALIDATE_RESP = 0x0A
    LOCATION_FIX = 0x0B


KNOWN_TYPES = frozenset(int(m) for m in MsgType)


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME - 1:
        raise FrameError("OVERSIZE", f"payload of {len(payload)} bytes")
    if not 0 <= msg_type <= 0xFF:
        raise FrameError("BAD_TYPE", str(msg_type))
    return struct.pack(">IB", len(payload) + 1, msg_type) + payload


def frame_length(header: bytes) -> int:
    """Validate a 4-byte length prefix and return the body length."""
    if len(header) < 4:
        raise FrameError("TRUNCATED", "length prefix")
    length = struct.unpack(">I", header[:4])[0]
    if length < 1:
        raise FrameError("SHORT", "length must cover the type byte")
    if length > MAX_FRAME:
        raise FrameError("OVERSIZE", f"declared length {length}")
    return length


def decode_frame(data: bytes) -> tuple[int, bytes]:
    """Decode exactly one frame. Unknown types raise ``FrameError('UNKNOWN_TYPE')``."""
    length = frame_length(data)
    if len(data) < 4 + length:
        raise FrameError("TRUNCATED", f"need {4 + length} bytes, have {len(data)}")
    if len(data) > 4 + length:
        raise FrameError("TRAILING_BYTES", f"{len(data) - 4 - length} extra")
    msg_type = data[4]
    if msg_type not in KNOWN_TYPES:
        raise FrameError("UNKNOWN_TYPE", f"{msg_type:#04x}")
    return msg_type, bytes(data[5:])


def split_frames(buffer: bytearray):
    """Pop every complete frame off ``buffer``; yields (msg_type, payload) or FrameError.

    An unknown type consumes its frame and yields the error object, so the
    stream stays in sync.
    """
    while len(buffer) >= 4:
        length = frame_length(bytes(buffer[:4]))
        if len(buffer) < 4 + length:
            return
        frame = bytes(buffer[:4 + length])
        del buffer[:4 + length]
        try:
            yield decode_frame(frame)
        except FrameError as exc:
            yield exc


def pack_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def unpack_json(payload: bytes) -> dict:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError("BAD_PAYLOAD", str(exc)) from None
    if not isinstance(obj, dict):
        raise FrameError("BAD_PAYLOAD", "payload must be a JSON object")
    return obj
