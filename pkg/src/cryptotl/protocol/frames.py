"""Length-prefixed wire frames.

A frame is a 4-byte big-endian payload length, a 1-byte type tag and the
payload. QUERY and RESPONSE payloads begin with a u64 sequence number that the
server echoes; ERROR payloads carry a code, the sequence number they refer to
(0 when none) and a UTF-8 message.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass

from ..errors import FrameError

DEFAULT_MAX_FRAME = 256 * 1024 * 1024
DEFAULT_PORT = 7431
HEADER = struct.Struct(">IB")
PROTOCOL_VERSION = 1


class Tag(enum.IntEnum):
    HELLO = 0x01
    EVALKEYS = 0x02
    QUERY = 0x03
    RESPONSE = 0x04
    ERROR = 0x7F


class ErrorCode(enum.IntEnum):
    FINGERPRINT_MISMATCH = 0x01
    KEYS_REQUIRED = 0x02
    MALFORMED = 0x03
    UNEXPECTED_FRAME = 0x04
    CRYPTO = 0x05
    INTERNAL = 0x06
    FRAME_TOO_LARGE = 0x07
    SHUTDOWN = 0x08


def max_frame_size() -> int:
    raw = os.environ.get("CRYPTOTL_MAX_FRAME")
    if raw is None:
        return DEFAULT_MAX_FRAME
    try:
        value = int(raw)
    except ValueError:
        raise FrameError(f"CRYPTOTL_MAX_FRAME must be an integer, got {raw!r}") from None
    if value <= 0:
        raise FrameError("CRYPTOTL_MAX_FRAME must be positive")
    return value


def default_port() -> int:
    raw = os.environ.get("CRYPTOTL_PORT")
    if raw is None:
        return DEFAULT_PORT
    try:
        port = int(raw)
    except ValueError:
        raise FrameError(f"CRYPTOTL_PORT must be an integer, got {raw!r}") from None
    if not 0 < port < 65536:
        raise FrameError(f"CRYPTOTL_PORT out of range: {port}")
    return port


@dataclass(frozen=True)
class Frame:
    tag: Tag
    payload: bytes = b""

    def encode(self) -> bytes:
        return HEADER.pack(len(self.payload), int(self.tag)) + bytes(self.payload)


def encode_frame(tag, payload: bytes = b"") -> bytes:
    return Frame(Tag(tag), payload).encode()


def parse_header(head: bytes, max_frame: int | None = None) -> tuple:
    if len(head) != HEADER.size:
        raise FrameError("truncated frame header")
    length, tag = HEADER.unpack(head)
    limit = max_frame_size() if max_frame is None else max_frame
    if length > limit:
        raise FrameError(f"frame of {length} bytes exceeds the {limit}-byte limit")
    try:
        tag = Tag(tag)
    except ValueError:
        raise FrameError(f"unknown frame tag 0x{tag:02x}") from None
    return length, tag


def decode_frame(buf: bytes, max_frame: int | None = None) -> Frame:
    """Decode exactly one frame occupying all of ``buf``."""
    length, tag = parse_header(bytes(buf[: HEADER.size]), max_frame)
    if len(buf) - HEADER.size != length:
        raise FrameError(f"frame declares {length} payload bytes, has {len(buf) - HEADER.size}")
    return Frame(tag, bytes(buf[HEADER.size:]))


def read_frame(read_exact, max_frame: int | None = None) -> Frame | None:
    """Read one frame with ``read_exact(n)``; None on a clean end of stream."""
    head = read_exact(HEADER.size)
    if not head:
        return None
    if len(head) < HEADER.size:
        raise FrameError("stream ended inside a frame header")
    length, tag = parse_header(head, max_frame)
    payload = read_exact(length) if length else b""
    if len(payload) < length:
        raise FrameError("stream ended inside a frame payload")
    return Frame(tag, payload)


# --------------------------------------------------------------------------- payloads

_HELLO = struct.Struct("<H32s")
_SEQ = struct.Struct("<Q")
_ERR = struct.Struct("<BQH")


def hello(fingerprint: bytes) -> Frame:
    return Frame(Tag.HELLO, _HELLO.pack(PROTOCOL_VERSION, fingerprint))


def parse_hello(payload: bytes) -> bytes:
    if len(payload) != _HELLO.size:
        raise FrameError("HELLO payload has the wrong length")
    version, fp = _HELLO.unpack(payload)
    if version != PROTOCOL_VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    return fp


def with_seq(tag: Tag, seq: int, body: bytes) -> Frame:
    return Frame(tag, _SEQ.pack(seq) + body)


def split_seq(payload: bytes) -> tuple:
    if len(payload) < _SEQ.size:
        raise FrameError("payload too short for a sequence number")
    return _SEQ.unpack_from(payload)[0], payload[_SEQ.size:]


def error(code: ErrorCode, message: str, seq: int = 0) -> Frame:
    msg = message.encode("utf-8")[:65535]
    return Frame(Tag.ERROR, _ERR.pack(int(code), seq, len(msg)) + msg)


def parse_error(payload: bytes) -> tuple:
    """Returns (code, seq, message); unknown codes are kept as plain ints."""
    if len(payload) < _ERR.size:
        raise FrameError("ERROR payload too short")
    code, seq, n = _ERR.unpack_from(payload)
    if len(payload) != _ERR.size + n:
        raise FrameError("ERROR payload length mismatch")
    msg = payload[_ERR.size:].decode("utf-8", errors="replace")
    try:
        code = ErrorCode(code)
    except ValueError:
        pass
    return code, seq, msg
