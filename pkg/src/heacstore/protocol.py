"""Length-prefixed binary framing and body codecs.

A frame is ``u32_be length | u8 opcode | body`` where ``length`` counts the
opcode byte plus the body.  Integers in bodies are fixed-width big-endian;
byte strings carry a ``u32_be`` length prefix.
"""

from __future__ import annotations

import enum
import socket
import struct
import uuid as uuidlib

from .errors import ERRORS_BY_CODE, HeacStoreError, ProtocolError

MAX_FRAME = 16 * 1024 * 1024
_LEN = struct.Struct(">I")


class Op(enum.IntEnum):
    CREATE_STREAM = 0x01
    DELETE_STREAM = 0x02
    ROLLUP_STREAM = 0x03
    INSERT_RECORD = 0x04
    GET_RANGE = 0x05
    GET_STAT_RANGE = 0x06
    DELETE_RANGE = 0x07
    GRANT_ACCESS = 0x08
    GRANT_OPEN_ACCESS = 0x09
    REVOKE_ACCESS = 0x0A
    REGISTER_PRINCIPAL = 0x0B
    FETCH_GRANTS = 0x0C
    PUT_ENVELOPES = 0x0D
    GET_ENVELOPES = 0x0E
    STREAM_INFO = 0x0F
    ERROR = 0x7F


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int):
        self._parts.append(struct.pack(">B", v))
        return self

    def u16(self, v: int):
        self._parts.append(struct.pack(">H", v))
        return self

    def u32(self, v: int):
        self._parts.append(struct.pack(">I", v))
        return self

    def u64(self, v: int):
        self._parts.append(struct.pack(">Q", v))
        return self

    def i64(self, v: int):
        self._parts.append(struct.pack(">q", v))
        return self

    def raw(self, b: bytes):
        self._parts.append(bytes(b))
        return self

    def blob(self, b: bytes):
        self._parts.append(_LEN.pack(len(b)) + bytes(b))
        return self

    def text(self, s: str):
        return self.blob(s.encode())

    def uuid(self, u: uuidlib.UUID):
        self._parts.append(u.bytes)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.off = 0

    def _take(self, n: int) -> memoryview:
        if self.off + n > len(self.data):
            raise ProtocolError(f"body truncated: wanted {n} bytes at offset {self.off}")
        view = self.data[self.off:self.off + n]
        self.off += n
        return view

    def _unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self._take(size))[0]

    def u8(self) -> int:
        return self._unpack(">B")

    def u16(self) -> int:
        return self._unpack(">H")

    def u32(self) -> int:
        return self._unpack(">I")

    def u64(self) -> int:
        return self._unpack(">Q")

    def i64(self) -> int:
        return self._unpack(">q")

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def blob(self) -> bytes:
        return bytes(self._take(self.u32()))

    def text(self) -> str:
        try:
            return self.blob().decode()
        except UnicodeDecodeError as e:
            raise ProtocolError(f"invalid utf-8: {e}") from None

    def uuid(self) -> uuidlib.UUID:
        return uuidlib.UUID(bytes=self.raw(16))

    def rest(self) -> bytes:
        return bytes(self._take(len(self.data) - self.off))

    def done(self):
        if self.off != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.off} trailing bytes in body")


def encode_frame(op: int, body: bytes = b"") -> bytes:
    if 1 + len(body) > MAX_FRAME:
        raise ProtocolError("frame exceeds 16 MiB")
    return _LEN.pack(1 + len(body)) + bytes([op]) + body


def decode_frame(frame: bytes) -> tuple[int, bytes]:
    if len(frame) < 5:
        raise ProtocolError("frame shorter than header")
    (length,) = _LEN.unpack_from(frame)
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    if length != len(frame) - 4:
        raise ProtocolError("frame length does not match payload")
    return frame[4], frame[5:]


def error_frame(err: Exception) -> bytes:
    code = err.code if isinstance(err, HeacStoreError) else 1
    return encode_frame(Op.ERROR, Writer().u16(code).text(str(err)[:4096]).getvalue())


def raise_for_reply(op: int, body: bytes) -> bytes:
    """Return the reply body, or raise the error an ERROR reply carries."""
    if op == Op.ERROR:
        r = Reader(body)
        code, msg = r.u16(), r.text()
        raise ERRORS_BY_CODE.get(code, HeacStoreError)(msg)
    return body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(min(n - len(buf), 1 << 20))
        if not part:
            raise ConnectionError("connection closed mid-frame")
        buf += part
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes | None:
    """Read one frame; ``None`` on clean EOF.  Oversized frames are drained and
    reported as :class:`ProtocolError` so the connection stays usable."""
    head = sock.recv(4, socket.MSG_WAITALL)
    if not head:
        return None
    if len(head) < 4:
        head += _recv_exact(sock, 4 - len(head))
    (length,) = _LEN.unpack(head)
    if length > MAX_FRAME:
        left = length
        while left:
            left -= len(_recv_exact(sock, min(left, 1 << 20)))
        raise ProtocolError(f"frame of {length} bytes exceeds 16 MiB")
    if length == 0:
        raise ProtocolError("zero-length frame")
    return head + _recv_exact(sock, length)
