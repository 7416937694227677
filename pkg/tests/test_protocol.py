"""Wire framing and the TCP front end."""

import socket
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from heacstore.errors import ProtocolError, UnknownPrincipal
from heacstore.protocol import (MAX_FRAME, Op, Reader, Writer, decode_frame, encode_frame,
                                error_frame, raise_for_reply, read_frame)
from heacstore.server import Engine, TcpServer


class TestCodec:
    def test_frame_layout(self):
        assert encode_frame(Op.GET_RANGE, b"xy") == b"\x00\x00\x00\x03\x05xy"

    @given(st.integers(0, 255), st.binary(max_size=500))
    def test_frame_roundtrip(self, op, body):
        assert decode_frame(encode_frame(op, body)) == (op, body)

    @pytest.mark.parametrize("frame", [b"", b"\x00\x00\x00\x01", b"\x00\x00\x00\x00\x01",
                                       b"\x00\x00\x00\x05\x01ab", b"\xff\xff\xff\xff\x01"])
    def test_malformed(self, frame):
        with pytest.raises(ProtocolError):
            decode_frame(frame)

    def test_oversized_encode(self):
        with pytest.raises(ProtocolError):
            encode_frame(1, bytes(MAX_FRAME))

    def test_body_fields(self):
        import uuid
        u = uuid.uuid4()
        raw = Writer().u8(1).u16(2).u32(3).u64(4).i64(-5).blob(b"ab").text("zé").uuid(u).getvalue()
        r = Reader(raw)
        assert (r.u8(), r.u16(), r.u32(), r.u64(), r.i64(), r.blob(), r.text(), r.uuid()) == \
            (1, 2, 3, 4, -5, b"ab", "zé", u)
        r.done()

    def test_truncated_body(self):
        with pytest.raises(ProtocolError):
            Reader(b"\x00\x00\x00\x09abc").blob()
        with pytest.raises(ProtocolError):
            Reader(b"\x01").done()

    def test_error_frame_maps_to_exception(self):
        op, body = decode_frame(error_frame(UnknownPrincipal("who")))
        assert op == Op.ERROR
        with pytest.raises(UnknownPrincipal, match="who"):
            raise_for_reply(op, body)


class TestEngineDispatch:
    def test_unknown_opcode(self):
        op, body = decode_frame(Engine().handle(encode_frame(0x42, b"")))
        with pytest.raises(ProtocolError, match="0x42"):
            raise_for_reply(op, body)

    def test_garbage_never_raises(self):
        eng = Engine()
        for frame in [b"", b"\x00\x00\x00\x02\x01", encode_frame(Op.CREATE_STREAM, b"\x00\x01")]:
            op, _ = decode_frame(eng.handle(frame))
            assert op == Op.ERROR

    def test_unregistered_principal(self):
        body = Writer().text("mallory").raw(bytes(8)).u64(1).blob(bytes(64)).getvalue()
        op, reply = decode_frame(Engine().handle(encode_frame(Op.STREAM_INFO, body)))
        with pytest.raises(UnknownPrincipal):
            raise_for_reply(op, reply)


@pytest.fixture
def server():
    srv = TcpServer(Engine()).start()
    yield srv
    srv.shutdown()
    srv.server_close()


def _exchange(sock, frame):
    sock.sendall(frame)
    return decode_frame(read_frame(sock))


class TestTcp:
    def test_connection_survives_errors(self, server):
        with socket.create_connection(server.address) as s:
            assert _exchange(s, encode_frame(0x42))[0] == Op.ERROR
            assert _exchange(s, encode_frame(Op.GET_RANGE, b"junk"))[0] == Op.ERROR
            op, _ = _exchange(s, encode_frame(Op.REGISTER_PRINCIPAL,
                                              Writer().text("p").blob(bytes(32)).blob(bytes(32)).getvalue()))
            assert op == Op.REGISTER_PRINCIPAL

    def test_oversized_frame_drained(self, server):
        with socket.create_connection(server.address) as s:
            n = MAX_FRAME + 1
            s.sendall(struct.pack(">I", n) + bytes(n))
            op, body = decode_frame(read_frame(s))
            assert op == Op.ERROR
            with pytest.raises(ProtocolError, match="exceeds"):
                raise_for_reply(op, body)
            assert _exchange(s, encode_frame(0x42))[0] == Op.ERROR

    def test_zero_length_frame(self, server):
        with socket.create_connection(server.address) as s:
            s.sendall(b"\x00\x00\x00\x00")
            assert decode_frame(read_frame(s))[0] == Op.ERROR
