"""Storage server: stream registry, encrypted index, key store, wire dispatch.

The server never sees a key.  It stores sealed chunks, folds encrypted
digests, and keeps opaque hybrid-encrypted grants and key envelopes for
principals to fetch.  Requests carry an Ed25519 signature from a registered
principal over ``opcode | session | counter | payload``; counters must
increase within a session.
"""

from __future__ import annotations

import logging
import socketserver
import struct
import threading
import uuid as uuidlib
from dataclasses import dataclass, field
from pathlib import Path

from .chunking import SealedChunk, StreamConfig
from .errors import (DuplicateStream, HeacStoreError, InvalidRange,
                     LayoutMismatch, NotOwner, OutOfOrder, ProtocolError, UnalignedRange,
                     UnknownPrincipal, UnknownStream)
from .heac import EncryptedDigest
from .identity import PublicIdentity
from .index import EncryptedIndex, NodeCache, chunk_key, delete_range
from .kvstore import KvStore, MemoryKvStore
from .protocol import Op, Reader, Writer, decode_frame, encode_frame, error_frame, read_frame

log = logging.getLogger(__name__)

KIND_TOKENS, KIND_DKR = 1, 2


@dataclass
class StreamState:
    config: StreamConfig
    owner: str
    index: EncryptedIndex
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def next_index(self) -> int:
        return self.index.n


@dataclass(frozen=True)
class TokenStoreEntry:
    principal: str
    uuid: uuidlib.UUID
    kind: int
    start: int
    end: int
    res: int
    ciphertext: bytes
    open_ended: bool = False

    def to_bytes(self) -> bytes:
        return (Writer().u8(self.kind).u8(int(self.open_ended)).i64(self.start).i64(self.end)
                .i64(self.res).blob(self.ciphertext).getvalue())

    @classmethod
    def read(cls, r: Reader, principal: str, uuid: uuidlib.UUID) -> "TokenStoreEntry":
        kind, open_ended = r.u8(), bool(r.u8())
        start, end, res = r.i64(), r.i64(), r.i64()
        return cls(principal, uuid, kind, start, end, res, r.blob(), open_ended)


def _reg_key(u) -> str:
    return f"reg/{u}"


def _tok_prefix(u, principal: str | None = None) -> str:
    return f"tok/{u}/" if principal is None else f"tok/{u}/{principal}/"


def _env_key(u, stride: int, j: int) -> str:
    return f"env/{u}/{stride}/{j:016x}"


class Engine:
    """Transport-independent request handler over a :class:`KvStore`."""

    def __init__(self, store: KvStore | None = None, cache_bytes: int = 1 << 20):
        self.store = store if store is not None else MemoryKvStore()
        self.cache = NodeCache(cache_bytes)
        self._streams: dict[str, StreamState] = {}
        self._principals: dict[str, PublicIdentity] = {}
        self._counters: dict[tuple[str, bytes], int] = {}
        self._lock = threading.RLock()
        self._load()
        self._handlers = {
            Op.CREATE_STREAM: self._create_stream,
            Op.DELETE_STREAM: self._delete_stream,
            Op.ROLLUP_STREAM: self._rollup_stream,
            Op.INSERT_RECORD: self._insert_record,
            Op.GET_RANGE: self._get_range,
            Op.GET_STAT_RANGE: self._get_stat_range,
            Op.DELETE_RANGE: self._delete_range,
            Op.GRANT_ACCESS: self._grant_access,
            Op.GRANT_OPEN_ACCESS: self._grant_open_access,
            Op.REVOKE_ACCESS: self._revoke_access,
            Op.FETCH_GRANTS: self._fetch_grants,
            Op.PUT_ENVELOPES: self._put_envelopes,
            Op.GET_ENVELOPES: self._get_envelopes,
            Op.STREAM_INFO: self._stream_info,
        }

    # persistence -----------------------------------------------------------

    def _load(self):
        for key, raw in self.store.scan("prn/"):
            r = Reader(raw)
            pub = PublicIdentity(key[4:], r.blob(), r.blob())
            self._principals[pub.principal_id] = pub
        for key, raw in self.store.scan("reg/"):
            r = Reader(raw)
            cfg = StreamConfig.from_bytes(r.blob())
            n, owner = r.u64(), r.text()
            self._streams[str(cfg.uuid)] = self._state(cfg, owner, n)

    def _state(self, cfg: StreamConfig, owner: str, n: int = 0) -> StreamState:
        idx = EncryptedIndex(self.store, str(cfg.uuid), cfg.fanout, len(cfg.layout), n, self.cache)
        return StreamState(cfg, owner, idx)

    def _save_registry(self, st: StreamState):
        self.store.put(_reg_key(st.config.uuid),
                       Writer().blob(st.config.to_bytes()).u64(st.next_index).text(st.owner).getvalue())

    # dispatch --------------------------------------------------------------

    def handle(self, frame: bytes) -> bytes:
        """Process one request frame and return the reply frame; never raises."""
        try:
            op, body = decode_frame(frame)
            if op == Op.REGISTER_PRINCIPAL:
                return encode_frame(op, self._register(Reader(body)))
            try:
                handler = self._handlers[Op(op)]
            except (ValueError, KeyError):
                raise ProtocolError(f"unknown opcode 0x{op:02x}") from None
            caller, payload = self._authenticate(op, body)
            r = Reader(payload)
            reply = handler(caller, r)
            return encode_frame(op, reply)
        except HeacStoreError as e:
            return error_frame(e)
        except Exception as e:  # noqa: BLE001 - the connection must survive any request
            log.exception("internal error")
            return error_frame(e)

    def _authenticate(self, op: int, body: bytes) -> tuple[str, bytes]:
        r = Reader(body)
        pid, session, counter, sig = r.text(), r.raw(8), r.u64(), r.blob()
        payload = r.rest()
        pub = self._principals.get(pid)
        if pub is None:
            raise UnknownPrincipal(f"principal {pid!r} is not registered")
        if not pub.verify(sig, bytes([op]) + session + struct.pack(">Q", counter) + payload):
            raise NotOwner("request signature invalid")
        with self._lock:
            last = self._counters.get((pid, session), -1)
            if counter <= last:
                raise NotOwner(f"replayed request counter {counter}")
            self._counters[(pid, session)] = counter
        return pid, payload

    def _stream(self, u: uuidlib.UUID) -> StreamState:
        st = self._streams.get(str(u))
        if st is None:
            raise UnknownStream(f"stream {u} does not exist")
        return st

    def _owned(self, caller: str, u: uuidlib.UUID) -> StreamState:
        st = self._stream(u)
        if st.owner != caller:
            raise NotOwner(f"{caller!r} does not own stream {u}")
        return st

    @staticmethod
    def _chunk_bounds(cfg: StreamConfig, ts: int, te: int, aligned: bool) -> tuple[int, int]:
        if ts >= te:
            raise InvalidRange(f"empty time range [{ts}, {te})")
        if aligned and ((ts - cfg.t0) % cfg.delta or (te - cfg.t0) % cfg.delta):
            raise UnalignedRange(f"[{ts}, {te}) not aligned to the {cfg.delta} ms chunk grid")
        i = max((ts - cfg.t0) // cfg.delta, 0)
        j = -(-(te - cfg.t0) // cfg.delta)
        return i, j

    # handlers --------------------------------------------------------------

    def _register(self, r: Reader) -> bytes:
        pub = PublicIdentity(r.text(), r.blob(), r.blob())
        r.done()
        if len(pub.sign_pub) != 32 or len(pub.kex_pub) != 32:
            raise ProtocolError("public keys must be 32 bytes")
        with self._lock:
            known = self._principals.get(pub.principal_id)
            if known is not None and known != pub:
                raise NotOwner(f"principal {pub.principal_id!r} already registered with other keys")
            self._principals[pub.principal_id] = pub
            self.store.put(f"prn/{pub.principal_id}",
                           Writer().blob(pub.sign_pub).blob(pub.kex_pub).getvalue())
        return b""

    def _create_stream(self, caller: str, r: Reader) -> bytes:
        cfg = StreamConfig.from_bytes(r.blob())
        r.done()
        with self._lock:
            if str(cfg.uuid) in self._streams:
                raise DuplicateStream(f"stream {cfg.uuid} exists")
            st = self._state(cfg, caller)
            self._streams[str(cfg.uuid)] = st
            self._save_registry(st)
        return b""

    def _delete_stream(self, caller: str, r: Reader) -> bytes:
        u = r.uuid()
        r.done()
        with self._lock:
            self._owned(caller, u)
            del self._streams[str(u)]
            for prefix in (f"idx/{u}/", f"chk/{u}/", f"tok/{u}/", f"rev/{u}/", f"env/{u}/"):
                self.store.delete_prefix(prefix)
            self.store.delete(_reg_key(u))
            self.cache.discard_prefix(f"idx/{u}/")
        return b""

    def _rollup_stream(self, caller: str, r: Reader) -> bytes:
        u, res, ts, te = r.uuid(), r.i64(), r.i64(), r.i64()
        r.done()
        st = self._owned(caller, u)
        cfg = st.config
        if res % cfg.delta:
            raise UnalignedRange(f"resolution {res} is not a multiple of the chunk interval")
        i, j = self._chunk_bounds(cfg, ts, te, aligned=True)
        with st.lock:
            deleted = st.index.rollup(res // cfg.delta, i, j)
            delete_range(self.store, str(u), i, j)
        return Writer().u64(deleted).getvalue()

    def _insert_record(self, caller: str, r: Reader) -> bytes:
        u = r.uuid()
        chunk = SealedChunk.from_bytes(r.blob())
        r.done()
        st = self._owned(caller, u)
        with st.lock:
            if chunk.index != st.next_index:
                raise OutOfOrder(f"chunk {chunk.index} sent, expected {st.next_index}")
            if len(chunk.digest) != len(st.config.layout):
                raise LayoutMismatch("digest does not match the stream layout")
            self.store.put(chunk_key(str(u), chunk.index), chunk.to_bytes())
            st.index.insert_digest(chunk.index, chunk.digest)
            self._save_registry(st)
        return Writer().u64(chunk.index).getvalue()

    def _get_range(self, caller: str, r: Reader) -> bytes:
        u, ts, te = r.uuid(), r.i64(), r.i64()
        r.done()
        st = self._stream(u)
        i, j = self._chunk_bounds(st.config, ts, te, aligned=False)
        j = min(j, st.next_index)
        w = Writer()
        rolled = any(st.index.is_rolled_up(x) for x in range(i, j))
        chunks = []
        for x in range(i, j):
            raw = self.store.get(chunk_key(str(u), x))
            if raw is not None:
                chunks.append(raw)
        w.u8(1 if rolled else 0).u32(len(chunks))
        for raw in chunks:
            w.blob(raw)
        return w.getvalue()

    def _get_stat_range(self, caller: str, r: Reader) -> bytes:
        uuids = [r.uuid() for _ in range(r.u16())]
        # the operator mask is advisory: every slot is returned and the client decodes what it needs
        ts, te = r.i64(), r.i64()
        r.u16()
        combine = r.u8()
        r.done()
        if not uuids:
            raise InvalidRange("no streams requested")
        w = Writer().u16(len(uuids))
        digests = []
        for u in uuids:
            st = self._stream(u)
            i, j = self._chunk_bounds(st.config, ts, te, aligned=True)
            d = st.index.query_range(i, j)
            digests.append((st, d))
            w.uuid(u).u64(i).u64(j).blob(d.to_bytes())
        if combine and len(digests) > 1:
            first = digests[0][0].config
            for st, _ in digests[1:]:
                if st.config.delta != first.delta or st.config.layout != first.layout:
                    raise LayoutMismatch("multi-stream aggregation needs equal interval and layout")
            total = digests[0][1].slots.copy()
            for _, d in digests[1:]:
                total += d.slots
            w.u8(1).blob(EncryptedDigest(total, digests[0][1].span).to_bytes())
        else:
            w.u8(0)
        return w.getvalue()

    def _delete_range(self, caller: str, r: Reader) -> bytes:
        u, ts, te = r.uuid(), r.i64(), r.i64()
        r.done()
        st = self._owned(caller, u)
        i, j = self._chunk_bounds(st.config, ts, te, aligned=True)
        with st.lock:
            removed = delete_range(self.store, str(u), i, min(j, st.next_index))
        return Writer().u64(removed).getvalue()

    def _store_entry(self, entry: TokenStoreEntry) -> int:
        with self._lock:
            seq = len(self.store.scan(_tok_prefix(entry.uuid, entry.principal)))
            self.store.put(f"{_tok_prefix(entry.uuid, entry.principal)}{seq:08d}", entry.to_bytes())
        return seq

    def _grant(self, caller: str, r: Reader, open_ended: bool) -> bytes:
        u, principal = r.uuid(), r.text()
        entry = TokenStoreEntry.read(r, principal, u)
        r.done()
        self._owned(caller, u)
        if principal not in self._principals:
            raise UnknownPrincipal(f"principal {principal!r} is not registered")
        if entry.start >= entry.end:
            raise InvalidRange("grant range is empty")
        entry = TokenStoreEntry(principal, u, entry.kind, entry.start, entry.end, entry.res,
                                entry.ciphertext, open_ended)
        if open_ended:
            revoked = self.store.get(f"rev/{u}/{principal}")
            if revoked is not None and entry.start >= struct.unpack(">q", revoked)[0]:
                raise InvalidRange(f"access of {principal!r} was revoked")
        return Writer().u64(self._store_entry(entry)).getvalue()

    def _grant_access(self, caller: str, r: Reader) -> bytes:
        return self._grant(caller, r, open_ended=False)

    def _grant_open_access(self, caller: str, r: Reader) -> bytes:
        return self._grant(caller, r, open_ended=True)

    def _revoke_access(self, caller: str, r: Reader) -> bytes:
        u, principal, end = r.uuid(), r.text(), r.i64()
        r.done()
        self._owned(caller, u)
        if principal not in self._principals:
            raise UnknownPrincipal(f"principal {principal!r} is not registered")
        with self._lock:
            self.store.put(f"rev/{u}/{principal}", struct.pack(">q", end))
            dropped = 0
            for key, raw in self.store.scan(_tok_prefix(u, principal)):
                e = TokenStoreEntry.read(Reader(raw), principal, u)
                if e.open_ended and e.start >= end:
                    self.store.delete(key)
                    dropped += 1
        return Writer().u32(dropped).getvalue()

    def _fetch_grants(self, caller: str, r: Reader) -> bytes:
        u = r.uuid()
        r.done()
        self._stream(u)
        entries = self.store.scan(_tok_prefix(u, caller))
        w = Writer().u32(len(entries))
        for _, raw in entries:
            w.raw(raw)
        revoked = self.store.get(f"rev/{u}/{caller}")
        w.u8(revoked is not None).i64(struct.unpack(">q", revoked)[0] if revoked else 0)
        return w.getvalue()

    def _put_envelopes(self, caller: str, r: Reader) -> bytes:
        u, stride = r.uuid(), r.u64()
        blobs = [r.blob() for _ in range(r.u32())]
        r.done()
        self._owned(caller, u)
        for b in blobs:
            (j,) = struct.unpack_from(">Q", b)
            self.store.put(_env_key(u, stride, j), b)
        return Writer().u32(len(blobs)).getvalue()

    def _get_envelopes(self, caller: str, r: Reader) -> bytes:
        u, stride, lo, hi = r.uuid(), r.u64(), r.u64(), r.u64()
        r.done()
        self._stream(u)
        if hi < lo or hi - lo > 1 << 20:
            raise InvalidRange(f"envelope range [{lo}, {hi}] invalid")
        found = []
        for j in range(lo, hi + 1):
            raw = self.store.get(_env_key(u, stride, j))
            if raw is not None:
                found.append(raw)
        w = Writer().u32(len(found))
        for raw in found:
            w.blob(raw)
        return w.getvalue()

    def _stream_info(self, caller: str, r: Reader) -> bytes:
        u = r.uuid()
        r.done()
        st = self._stream(u)
        return Writer().blob(st.config.to_bytes()).u64(st.next_index).text(st.owner).getvalue()


# TCP front end --------------------------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        engine: Engine = self.server.engine
        sock = self.request
        while True:
            try:
                frame = read_frame(sock)
            except ProtocolError as e:
                sock.sendall(error_frame(e))
                continue
            except (ConnectionError, OSError):
                return
            if frame is None:
                return
            sock.sendall(engine.handle(frame))


class TcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, engine: Engine, address=("127.0.0.1", 0)):
        super().__init__(address, _Handler)
        self.engine = engine

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "TcpServer":
        threading.Thread(target=self.serve_forever, daemon=True).start()
        return self


@dataclass
class ServerConfig:
    listen: tuple[str, int] = ("127.0.0.1", 7070)
    data_dir: Path | None = None
    cache_bytes: int = 1 << 20


def load_server_config(path: str | Path) -> ServerConfig:
    """Parse ``key = value`` lines: ``listen``, ``data_dir``, ``cache_bytes``."""
    cfg = ServerConfig()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        if key == "listen":
            host, _, port = value.rpartition(":")
            cfg.listen = (host or "127.0.0.1", int(port))
        elif key == "data_dir":
            cfg.data_dir = Path(value)
        elif key == "cache_bytes":
            cfg.cache_bytes = int(value)
        else:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    return cfg
