"""Client roles: producer (seal and upload), owner (grants), consumer (query and decrypt).

All key material stays on this side of the wire.  The server is reached
through a transport that moves whole frames: :class:`LocalTransport` calls an
in-process :class:`~heacstore.server.Engine`, :class:`TcpTransport` talks to a
:class:`~heacstore.server.TcpServer`.
"""

from __future__ import annotations

import hashlib
import hmac
import math
import os
import socket
import struct
import threading
import uuid as uuidlib
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .chunking import (NullKeys, PlainDigest, SealedChunk, StreamConfig, TreeKeys,
                       assign_chunk_index, decrypt_digest, masks_from_leaf, open_chunk, seal_chunk)
from .dkr import DkrShare, DualKeyRegression, KeyEnvelope, envelope_unwrap, envelope_wrap
from .errors import (InvalidRange, LateArrival, LayoutMismatch, MissingEnvelope,
                     MissingGrant, OutOfShareRange, OutsideGrant, ProtocolError,
                     UnalignedForResolution, UnalignedResolution)
from .heac import EncryptedDigest
from .identity import Identity, PublicIdentity, hybrid_encrypt
from .keytree import AccessTokenSet, KeyDerivationTree, LeafDeriver, NodeLabel, range_cover
from .protocol import Op, Reader, Writer, decode_frame, encode_frame, raise_for_reply, read_frame
from .server import KIND_DKR, KIND_TOKENS, Engine, TokenStoreEntry

OPEN_EPOCH_CHUNKS = 1 << 10
DKR_CHAIN_CAP = 1 << 16

# operator bits for GetStatRange; the server returns every slot regardless
OPERATORS = {"sum": 1, "count": 2, "mean": 4, "var": 8, "stdev": 16, "hist": 32, "min": 64, "max": 128}
ALL_OPERATORS = sum(OPERATORS.values())


# transports -----------------------------------------------------------------


class LocalTransport:
    """Frames handed straight to an in-process engine."""

    def __init__(self, engine: Engine):
        self.engine = engine

    def request(self, frame: bytes) -> bytes:
        return self.engine.handle(frame)

    def close(self):
        pass


class TcpTransport:
    def __init__(self, host: str, port: int, timeout: float | None = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()

    def request(self, frame: bytes) -> bytes:
        with self._lock:
            self.sock.sendall(frame)
            reply = read_frame(self.sock)
        if reply is None:
            raise ConnectionError("server closed the connection")
        return reply

    def close(self):
        self.sock.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


# raw API --------------------------------------------------------------------


class Client:
    """Signed request/response calls for one principal; mirrors the server opcodes."""

    def __init__(self, identity: Identity, transport):
        self.identity = identity
        self.transport = transport
        self.session = os.urandom(8)
        self._counter = 0
        self._lock = threading.Lock()

    def _roundtrip(self, op: int, body: bytes) -> bytes:
        rop, rbody = decode_frame(self.transport.request(encode_frame(op, body)))
        body = raise_for_reply(rop, rbody)
        if rop != op:
            raise ProtocolError(f"reply opcode 0x{rop:02x} for request 0x{op:02x}")
        return body

    def call(self, op: int, payload: bytes = b"") -> Reader:
        with self._lock:
            self._counter += 1
            counter = self._counter
        msg = bytes([op]) + self.session + struct.pack(">Q", counter) + payload
        header = (Writer().text(self.identity.principal_id).raw(self.session).u64(counter)
                  .blob(self.identity.sign(msg)).getvalue())
        return Reader(self._roundtrip(op, header + payload))

    def register(self) -> None:
        pub = self.identity.public
        self._roundtrip(Op.REGISTER_PRINCIPAL,
                        Writer().text(pub.principal_id).blob(pub.sign_pub).blob(pub.kex_pub).getvalue())

    def create_stream(self, cfg: StreamConfig) -> None:
        self.call(Op.CREATE_STREAM, Writer().blob(cfg.to_bytes()).getvalue()).done()

    def delete_stream(self, u: uuidlib.UUID) -> None:
        self.call(Op.DELETE_STREAM, Writer().uuid(u).getvalue()).done()

    def stream_info(self, u: uuidlib.UUID) -> tuple[StreamConfig, int, str]:
        r = self.call(Op.STREAM_INFO, Writer().uuid(u).getvalue())
        return StreamConfig.from_bytes(r.blob()), r.u64(), r.text()

    def insert_record(self, u: uuidlib.UUID, chunk: SealedChunk) -> int:
        return self.call(Op.INSERT_RECORD, Writer().uuid(u).blob(chunk.to_bytes()).getvalue()).u64()

    def get_range(self, u: uuidlib.UUID, ts: int, te: int) -> tuple[list[SealedChunk], bool]:
        r = self.call(Op.GET_RANGE, Writer().uuid(u).i64(ts).i64(te).getvalue())
        rolled = bool(r.u8())
        return [SealedChunk.from_bytes(r.blob()) for _ in range(r.u32())], rolled

    def get_stat_range(self, uuids, ts: int, te: int, operators: int = ALL_OPERATORS,
                       combine: bool = False):
        """Per-stream ``(uuid, EncryptedDigest)`` list plus the combined digest, if asked for."""
        w = Writer().u16(len(uuids))
        for u in uuids:
            w.uuid(u)
        r = self.call(Op.GET_STAT_RANGE, w.i64(ts).i64(te).u16(operators).u8(combine).getvalue())
        out = []
        for _ in range(r.u16()):
            u, i, j = r.uuid(), r.u64(), r.u64()
            out.append((u, EncryptedDigest.from_bytes(r.blob(), (i, j))))
        combined = None
        if r.u8():
            combined = EncryptedDigest.from_bytes(r.blob(), out[0][1].span)
        return out, combined

    def rollup_stream(self, u: uuidlib.UUID, res: int, ts: int, te: int) -> int:
        return self.call(Op.ROLLUP_STREAM, Writer().uuid(u).i64(res).i64(ts).i64(te).getvalue()).u64()

    def delete_range(self, u: uuidlib.UUID, ts: int, te: int) -> int:
        return self.call(Op.DELETE_RANGE, Writer().uuid(u).i64(ts).i64(te).getvalue()).u64()

    def grant_access(self, entry: TokenStoreEntry, open_ended: bool = False) -> int:
        op = Op.GRANT_OPEN_ACCESS if open_ended else Op.GRANT_ACCESS
        body = Writer().uuid(entry.uuid).text(entry.principal).raw(entry.to_bytes()).getvalue()
        return self.call(op, body).u64()

    def revoke_access(self, u: uuidlib.UUID, principal: str, end: int) -> int:
        return self.call(Op.REVOKE_ACCESS, Writer().uuid(u).text(principal).i64(end).getvalue()).u32()

    def fetch_grants(self, u: uuidlib.UUID) -> tuple[list[TokenStoreEntry], int | None]:
        r = self.call(Op.FETCH_GRANTS, Writer().uuid(u).getvalue())
        entries = [TokenStoreEntry.read(r, self.identity.principal_id, u) for _ in range(r.u32())]
        revoked, end = r.u8(), r.i64()
        return entries, (end if revoked else None)

    def put_envelopes(self, u: uuidlib.UUID, stride: int, envelopes) -> int:
        w = Writer().uuid(u).u64(stride).u32(len(envelopes))
        for env in envelopes:
            w.blob(env.to_bytes())
        return self.call(Op.PUT_ENVELOPES, w.getvalue()).u32()

    def get_envelopes(self, u: uuidlib.UUID, stride: int, lo: int, hi: int) -> list[KeyEnvelope]:
        r = self.call(Op.GET_ENVELOPES, Writer().uuid(u).u64(stride).u64(lo).u64(hi).getvalue())
        return [KeyEnvelope.from_bytes(r.blob()) for _ in range(r.u32())]

    def close(self):
        self.transport.close()


# producer -------------------------------------------------------------------


class Producer:
    """Buffers points of the open chunk; crossing a chunk boundary seals and uploads it."""

    def __init__(self, client: Client, cfg: StreamConfig, keys, next_index: int = 0):
        self.client = client
        self.cfg = cfg
        self.keys = keys
        self.next_index = next_index
        self._ts: list[np.ndarray] = []
        self._vs: list[np.ndarray] = []
        self.uploaded = 0

    def _upload(self, ts: np.ndarray, vs: np.ndarray):
        chunk = seal_chunk((ts, vs), self.cfg, self.keys, index=self.next_index)
        self.client.insert_record(self.cfg.uuid, chunk)
        self.next_index += 1
        self.uploaded += 1

    def _seal_open(self):
        if self._ts:
            ts, vs = np.concatenate(self._ts), np.concatenate(self._vs)
        else:
            ts = vs = np.empty(0, np.int64)
        self._ts, self._vs = [], []
        self._upload(ts, vs)

    def _advance(self, idx: int):
        """Seal everything before chunk ``idx``, including empty gap chunks."""
        if idx < self.next_index:
            raise LateArrival(f"chunk {idx} already sealed; producer is at {self.next_index}")
        while self.next_index < idx:
            self._seal_open()

    def produce(self, timestamp: int, value: int):
        idx = assign_chunk_index(timestamp, self.cfg)
        self._advance(idx)
        self._ts.append(np.array([timestamp], np.int64))
        self._vs.append(np.array([value], np.int64))

    def produce_many(self, timestamps, values):
        """Append a time-ordered batch of points."""
        ts = np.asarray(timestamps, dtype=np.int64)
        vs = np.asarray(values, dtype=np.int64)
        if len(ts) == 0:
            return
        if np.any(np.diff(ts) < 0):
            raise LateArrival("batch timestamps are not ordered")
        assign_chunk_index(int(ts[0]), self.cfg)
        idx = (ts - self.cfg.t0) // self.cfg.delta
        cuts = np.flatnonzero(np.diff(idx)) + 1
        for lo, hi in zip(np.r_[0, cuts], np.r_[cuts, len(ts)]):
            self._advance(int(idx[lo]))
            self._ts.append(ts[lo:hi])
            self._vs.append(vs[lo:hi])

    def advance_to(self, timestamp: int):
        """Seal every chunk that ends at or before ``timestamp``."""
        self._advance(max((timestamp - self.cfg.t0) // self.cfg.delta, 0))

    def flush(self):
        """Seal the open chunk now; later points for it raise :class:`LateArrival`."""
        self._seal_open()


# grants ---------------------------------------------------------------------


def grant_aad(u: uuidlib.UUID, principal: str) -> bytes:
    return b"heacstore/grant" + u.bytes + principal.encode()


def encode_token_grant(tokens: AccessTokenSet) -> bytes:
    return bytes([KIND_TOKENS]) + tokens.to_bytes()


def encode_dkr_grant(share: DkrShare, stride: int) -> bytes:
    return (bytes([KIND_DKR]) + share.to_bytes()
            + struct.pack(">QQQ", stride, share.lower, share.upper))


@dataclass
class ConsumerGrant:
    """Decrypted grant: chunk range ``[start, end)`` readable at ``stride``-chunk resolution."""

    uuid: uuidlib.UUID
    cfg: StreamConfig
    start: int
    end: int
    stride: int
    tokens: AccessTokenSet | None = None
    share: DkrShare | None = None
    fetch_envelopes: object = None
    _envelopes: dict[int, KeyEnvelope] = field(default_factory=dict, repr=False)
    _derivers: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_blob(cls, blob: bytes, u: uuidlib.UUID, cfg: StreamConfig, fetch_envelopes=None):
        kind = blob[0]
        if kind == KIND_TOKENS:
            tokens = AccessTokenSet.from_bytes(blob[1:], cfg.height)
            a, b = tokens.granted_range
            return cls(u, cfg, a, b - 1, 1, tokens=tokens)
        if kind == KIND_DKR:
            share = DkrShare.from_bytes(blob[1:49])
            stride, lo, hi = struct.unpack_from(">QQQ", blob, 49)
            return cls(u, cfg, lo * stride, hi * stride, stride, share=share,
                       fetch_envelopes=fetch_envelopes)
        raise ProtocolError(f"unknown grant kind {kind}")

    def covers(self, i: int, j: int) -> bool:
        return self.start <= i < j <= self.end

    def aligned(self, i: int, j: int) -> bool:
        return i % self.stride == 0 and j % self.stride == 0

    def check(self, i: int, j: int):
        if not self.covers(i, j):
            raise OutsideGrant(f"chunks [{i}, {j}) outside grant [{self.start}, {self.end})")
        if not self.aligned(i, j):
            raise UnalignedForResolution(f"[{i}, {j}) not aligned to stride {self.stride}")

    def leaf_secret(self, x: int) -> bytes:
        """Keystream secret of boundary ``x``; derivable only where the grant allows."""
        if self.tokens is not None:
            if x not in self.tokens:
                raise OutsideGrant(f"boundary {x} outside token range {self.tokens.granted_range}")
            tok = self.tokens.token_for(x)
            d = self._derivers.get(tok.label)
            if d is None:
                d = self._derivers[tok.label] = LeafDeriver(tok.secret, tok.label, self.cfg.height)
            return d.leaf_secret(x)
        if x % self.stride:
            raise UnalignedForResolution(f"boundary {x} not a multiple of stride {self.stride}")
        j = x // self.stride
        try:
            rk = self.share.key(j)
        except OutOfShareRange:
            raise OutsideGrant(f"boundary {x} outside share") from None
        env = self._envelopes.get(j)
        if env is None and self.fetch_envelopes is not None:
            for e in self.fetch_envelopes(self.stride, self.share.lower, self.share.upper):
                self._envelopes[e.index] = e
            env = self._envelopes.get(j)
        if env is None:
            raise MissingEnvelope(f"no envelope for boundary {x} at stride {self.stride}")
        return envelope_unwrap(env, rk)

    def masks(self, x: int) -> np.ndarray:
        return masks_from_leaf(self.leaf_secret(x), self.cfg.layout)


class PlaintextAccess:
    """Stand-in grant for plaintext-baseline streams: every mask is zero."""

    stride = 1

    def __init__(self, u: uuidlib.UUID, cfg: StreamConfig):
        self.uuid, self.cfg = u, cfg
        self._zeros = NullKeys(cfg.layout).masks(0)

    def covers(self, i, j):
        return True

    def aligned(self, i, j):
        return True

    def check(self, i, j):
        pass

    def masks(self, x):
        return self._zeros


class GrantUnion:
    """Adjacent grants on one stream read as one range, e.g. successive open-grant epochs.

    Each boundary is derived from a grant that reaches it, so no key outside
    the individual grants is ever needed.
    """

    def __init__(self, grants):
        self.grants = sorted(grants, key=lambda g: (g.start, g.stride))
        self.uuid = self.grants[0].uuid if self.grants else None
        self.cfg = self.grants[0].cfg if self.grants else None
        self.stride = max((g.stride for g in self.grants), default=1)

    def _reaching(self, x: int):
        return [g for g in self.grants if g.start <= x <= g.end and x % g.stride == 0]

    def covers(self, i: int, j: int) -> bool:
        reach = i
        for g in self.grants:
            if g.start <= reach < g.end:
                reach = max(reach, g.end)
        return i < j <= reach

    def aligned(self, i: int, j: int) -> bool:
        return bool(self._reaching(i)) and bool(self._reaching(j))

    def check(self, i: int, j: int):
        if not self.covers(i, j):
            raise OutsideGrant(f"chunks [{i}, {j}) outside the held grants")
        if not self.aligned(i, j):
            raise UnalignedForResolution(f"[{i}, {j}) not aligned to the held grants")

    def masks(self, x: int) -> np.ndarray:
        held = self._reaching(x)
        if not held:
            raise OutsideGrant(f"boundary {x} outside the held grants")
        return held[0].masks(x)


# owner ----------------------------------------------------------------------


def _derive_seed(root: bytes, label: bytes) -> bytes:
    return hmac.new(root, label, hashlib.sha256).digest()[:16]


class Owner:
    """Holds a stream's root secret; creates the stream, issues and revokes grants."""

    def __init__(self, client: Client, cfg: StreamConfig, root_secret: bytes | None = None,
                 plaintext: bool = False, dkr_cap: int = DKR_CHAIN_CAP,
                 epoch_chunks: int = OPEN_EPOCH_CHUNKS):
        self.client = client
        self.cfg = cfg
        self.root_secret = root_secret if root_secret is not None else os.urandom(16)
        self.tree = KeyDerivationTree(self.root_secret, cfg.height, cfg.uuid.bytes)
        self.plaintext = plaintext
        self.dkr_cap = dkr_cap
        self.epoch_chunks = epoch_chunks
        self._dkr: dict[int, DualKeyRegression] = {}
        self._published: dict[int, set[int]] = {}
        self._open: dict[str, tuple[PublicIdentity, int, int]] = {}
        self._revoked: dict[str, int] = {}

    def create_stream(self):
        self.client.create_stream(self.cfg)

    def keys(self):
        return NullKeys(self.cfg.layout) if self.plaintext else TreeKeys(self.tree, self.cfg.layout)

    def producer(self, next_index: int | None = None) -> Producer:
        if next_index is None:
            next_index = self.client.stream_info(self.cfg.uuid)[1]
        return Producer(self.client, self.cfg, self.keys(), next_index)

    # grant construction ----------------------------------------------------

    def _stride_and_bounds(self, start: int, end: int, res: int) -> tuple[int, int, int]:
        cfg = self.cfg
        if res <= 0 or res % cfg.delta:
            raise UnalignedResolution(f"resolution {res} ms is not a multiple of {cfg.delta} ms")
        r = res // cfg.delta
        if (start - cfg.t0) % res or (end - cfg.t0) % res:
            raise UnalignedResolution(f"[{start}, {end}) not aligned to resolution {res} ms")
        a, b = (start - cfg.t0) // cfg.delta, (end - cfg.t0) // cfg.delta
        if not 0 <= a < b:
            raise InvalidRange(f"grant [{start}, {end}) is empty or before the epoch")
        return r, a, b

    def dkr(self, stride: int) -> DualKeyRegression:
        """The stride's dual key regression, built on first use."""
        d = self._dkr.get(stride)
        if d is None:
            n = min(self.tree.size // stride, self.dkr_cap)
            tag = struct.pack(">Q", stride)
            d = DualKeyRegression(n, _derive_seed(self.root_secret, b"dkr/primary/" + tag),
                                  _derive_seed(self.root_secret, b"dkr/secondary/" + tag))
            self._dkr[stride] = d
        return d

    def publish_envelopes(self, stride: int, lo: int, hi: int) -> int:
        """Wrap boundary secrets ``lo*stride .. hi*stride`` under their resolution keys."""
        d = self.dkr(stride)
        if hi > d.n:
            raise InvalidRange(f"boundary index {hi} beyond the stride-{stride} chain ({d.n})")
        done = self._published.setdefault(stride, set())
        todo = [j for j in range(lo, hi + 1) if j not in done]
        deriver = LeafDeriver(self.root_secret, NodeLabel(0), self.cfg.height)
        envs = [envelope_wrap(deriver.leaf_secret(j * stride), d.key(j)) for j in todo]
        for k in range(0, len(envs), 4096):
            self.client.put_envelopes(self.cfg.uuid, stride, envs[k:k + 4096])
        done.update(todo)
        return len(envs)

    def make_grant(self, principal: PublicIdentity, start: int, end: int, res: int | None = None,
                   ) -> TokenStoreEntry:
        """Build the hybrid-encrypted grant for ``[start, end)`` at resolution ``res`` ms."""
        res = self.cfg.delta if res is None else res
        r, a, b = self._stride_and_bounds(start, end, res)
        if r == 1:
            blob = encode_token_grant(range_cover(self.tree, a, b + 1))
            kind = KIND_TOKENS
        else:
            lo, hi = a // r, b // r
            self.publish_envelopes(r, lo, hi)
            blob = encode_dkr_grant(self.dkr(r).share(lo, hi), r)
            kind = KIND_DKR
        ct = hybrid_encrypt(principal.kex_pub, blob, grant_aad(self.cfg.uuid, principal.principal_id))
        return TokenStoreEntry(principal.principal_id, self.cfg.uuid, kind, start, end, res, ct)

    def grant(self, principal: PublicIdentity, start: int, end: int, res: int | None = None) -> int:
        return self.client.grant_access(self.make_grant(principal, start, end, res))

    def _epoch_span(self, r: int) -> int:
        return -(-self.epoch_chunks // r) * r * self.cfg.delta

    def grant_open(self, principal: PublicIdentity, start: int, res: int | None = None) -> int:
        """Subscribe ``principal`` from ``start`` on; tokens are issued one epoch at a time."""
        res = self.cfg.delta if res is None else res
        r, _, _ = self._stride_and_bounds(start, start + res, res)
        end = start + self._epoch_span(r)
        seq = self.client.grant_access(self.make_grant(principal, start, end, res), open_ended=True)
        self._revoked.pop(principal.principal_id, None)
        self._open[principal.principal_id] = (principal, end, res)
        return seq

    def extend_open_grants(self, until: int) -> int:
        """Issue further epochs to open subscribers until they reach past ``until`` ms."""
        issued = 0
        for pid, (pub, frontier, res) in list(self._open.items()):
            r = res // self.cfg.delta
            while frontier <= until:
                end = frontier + self._epoch_span(r)
                self.client.grant_access(self.make_grant(pub, frontier, end, res), open_ended=True)
                frontier = end
                issued += 1
            self._open[pid] = (pub, frontier, res)
        return issued

    def revoke(self, principal_id: str, end: int) -> int:
        """Stop extending ``principal_id``'s subscription past ``end``; drops unissued epochs."""
        self._open.pop(principal_id, None)
        self._revoked[principal_id] = end
        return self.client.revoke_access(self.cfg.uuid, principal_id, end)

    def full_access(self) -> ConsumerGrant:
        """Owner's own full-resolution view over every written chunk."""
        n = self.client.stream_info(self.cfg.uuid)[1]
        if self.plaintext:
            return PlaintextAccess(self.cfg.uuid, self.cfg)
        tokens = range_cover(self.tree, 0, max(n, 1) + 1)
        return ConsumerGrant(self.cfg.uuid, self.cfg, 0, max(n, 1), 1, tokens=tokens)


# consumer -------------------------------------------------------------------


@dataclass(frozen=True)
class StatResult:
    """Plaintext statistics of a range; min/max are bin intervals with their frequency."""

    sum: int
    count: int
    sumsq: int
    histogram: tuple[int, ...] = ()
    bin_boundaries: tuple[int, ...] = ()

    @property
    def mean_defined(self) -> bool:
        return self.count > 0

    @property
    def mean(self) -> Fraction | None:
        return Fraction(self.sum, self.count) if self.count else None

    @property
    def variance(self) -> Fraction | None:
        if not self.count:
            return None
        m = Fraction(self.sum, self.count)
        return Fraction(self.sumsq, self.count) - m * m

    @property
    def stdev(self) -> float | None:
        v = self.variance
        return None if v is None else math.sqrt(max(v, 0))

    def _bin(self, b: int) -> tuple[int, int, int]:
        e = self.bin_boundaries
        return e[b], e[b + 1], self.histogram[b]

    @property
    def min_bin(self) -> tuple[int, int, int] | None:
        """``(lo, hi, frequency)`` of the lowest non-empty bin."""
        nz = [b for b, c in enumerate(self.histogram) if c]
        return self._bin(nz[0]) if nz else None

    @property
    def max_bin(self) -> tuple[int, int, int] | None:
        nz = [b for b, c in enumerate(self.histogram) if c]
        return self._bin(nz[-1]) if nz else None

    @classmethod
    def from_digest(cls, d: PlainDigest, layout) -> "StatResult":
        return cls(d.sum, d.count, d.sumsq, tuple(d.bins), layout.bin_boundaries)

    def as_dict(self) -> dict:
        out = {"sum": self.sum, "count": self.count, "sumsq": self.sumsq,
               "mean": None if self.mean is None else float(self.mean),
               "variance": None if self.variance is None else float(self.variance),
               "stdev": self.stdev, "histogram": list(self.histogram)}
        out["min_bin"] = self.min_bin and list(self.min_bin)
        out["max_bin"] = self.max_bin and list(self.max_bin)
        return out


def decrypt_multi_stream(grants: dict, spans: dict, combined: EncryptedDigest) -> StatResult:
    """Decrypt a cross-stream slot sum; needs one grant for every contributing stream.

    ``spans`` maps each contributing stream uuid to its chunk span ``(i, j)``.
    """
    acc = None
    layout = None
    for u, (i, j) in spans.items():
        g = grants.get(u)
        if g is None:
            raise MissingGrant(f"no grant for stream {u}")
        g.check(i, j)
        if layout is not None and g.cfg.layout != layout:
            raise LayoutMismatch("streams have different digest layouts")
        layout = g.cfg.layout
        diff = g.masks(i) - g.masks(j)
        acc = diff if acc is None else acc + diff
    return StatResult.from_digest(decrypt_digest(combined, acc, np.zeros_like(acc)), layout)


class Consumer:
    """Reads streams through the grants held by this principal."""

    def __init__(self, client: Client):
        self.client = client
        self.grants: dict[uuidlib.UUID, list] = {}
        self.configs: dict[uuidlib.UUID, StreamConfig] = {}

    def config(self, u: uuidlib.UUID) -> StreamConfig:
        cfg = self.configs.get(u)
        if cfg is None:
            cfg = self.configs[u] = self.client.stream_info(u)[0]
        return cfg

    def load_grants(self, u: uuidlib.UUID) -> list[ConsumerGrant]:
        cfg = self.config(u)
        entries, _ = self.client.fetch_grants(u)
        aad = grant_aad(u, self.client.identity.principal_id)

        def fetch(stride, lo, hi):
            return self.client.get_envelopes(u, stride, lo, hi)

        out = [ConsumerGrant.from_blob(self.client.identity.open(e.ciphertext, aad), u, cfg, fetch)
               for e in entries]
        self.grants[u] = out
        return out

    def add_grant(self, grant):
        self.grants.setdefault(grant.uuid, []).append(grant)
        self.configs.setdefault(grant.uuid, grant.cfg)

    def _chunks(self, cfg: StreamConfig, ts: int, te: int, aligned: bool) -> tuple[int, int]:
        if ts >= te:
            raise InvalidRange(f"empty time range [{ts}, {te})")
        if aligned and ((ts - cfg.t0) % cfg.delta or (te - cfg.t0) % cfg.delta):
            raise UnalignedForResolution(f"[{ts}, {te}) not on the {cfg.delta} ms grid")
        return (ts - cfg.t0) // cfg.delta, -(-(te - cfg.t0) // cfg.delta)

    def grant_for(self, u: uuidlib.UUID, i: int, j: int, full_resolution: bool = False):
        """Best grant for chunks ``[i, j)``; raises why none fits."""
        held = self.grants.get(u)
        if not held:
            raise MissingGrant(f"no grant for stream {u}")
        covering = [g for g in held if g.covers(i, j) and (g.stride == 1 or not full_resolution)]
        if not covering:
            union = GrantUnion([g for g in held if g.stride == 1 or not full_resolution])
            if not union.covers(i, j):
                raise OutsideGrant(f"chunks [{i}, {j}) outside every grant for {u}")
            if not union.aligned(i, j):
                raise UnalignedForResolution(f"chunks [{i}, {j}) not aligned to any grant resolution")
            return union
        for g in sorted(covering, key=lambda g: g.stride):
            if g.aligned(i, j):
                return g
        raise UnalignedForResolution(f"chunks [{i}, {j}) not aligned to any grant resolution")

    def query_stats(self, u: uuidlib.UUID, ts: int, te: int, operators: int = ALL_OPERATORS
                    ) -> StatResult:
        cfg = self.config(u)
        i, j = self._chunks(cfg, ts, te, aligned=True)
        g = self.grant_for(u, i, j)
        ((_, enc),), _ = self.client.get_stat_range([u], ts, te, operators)
        return StatResult.from_digest(decrypt_digest(enc, g.masks(i), g.masks(j)), cfg.layout)

    def query_view(self, u: uuidlib.UUID, ts: int, te: int, step: int) -> list[StatResult]:
        """Consecutive ``step``-long windows over ``[ts, te)``, one statistics request each.

        Adjacent windows share a boundary, so each boundary key is derived once.
        """
        cfg = self.config(u)
        i, j = self._chunks(cfg, ts, te, aligned=True)
        if step <= 0 or step % cfg.delta or (te - ts) % step:
            raise UnalignedForResolution(f"step {step} does not tile [{ts}, {te}) on the chunk grid")
        r = step // cfg.delta
        g = self.grant_for(u, i, j)
        masks = {}

        def boundary(x):
            m = masks.get(x)
            if m is None:
                m = masks[x] = g.masks(x)
            return m

        out = []
        for a in range(i, j, r):
            ((_, enc),), _ = self.client.get_stat_range([u], cfg.chunk_start(a), cfg.chunk_start(a + r))
            out.append(StatResult.from_digest(decrypt_digest(enc, boundary(a), boundary(a + r)),
                                              cfg.layout))
        return out

    def query_raw(self, u: uuidlib.UUID, ts: int, te: int) -> list:
        cfg = self.config(u)
        i, j = self._chunks(cfg, ts, te, aligned=False)
        g = self.grant_for(u, i, j, full_resolution=True)
        chunks, _ = self.client.get_range(u, ts, te)
        points = []
        plain = isinstance(g, PlaintextAccess)
        for c in chunks:
            if plain:
                pts = open_chunk(c, cfg, None, None)
            else:
                pts = open_chunk(c, cfg, g.masks(c.index), g.masks(c.index + 1))
            points.extend(p for p in pts if ts <= p.timestamp < te)
        return points

    def query_multi_stats(self, uuids, ts: int, te: int) -> StatResult:
        """Statistics over the union of several equally-configured streams."""
        spans = {}
        for u in uuids:
            spans[u] = self._chunks(self.config(u), ts, te, aligned=True)
        grants = {}
        for u, (i, j) in spans.items():
            try:
                grants[u] = self.grant_for(u, i, j)
            except MissingGrant:
                pass
        missing = [u for u in uuids if u not in grants]
        if missing:
            raise MissingGrant(f"no grant for streams {missing}")
        _, combined = self.client.get_stat_range(list(uuids), ts, te, combine=True)
        if combined is None:
            combined = self.client.get_stat_range(list(uuids), ts, te)[0][0][1]
        return decrypt_multi_stream(grants, spans, combined)


def connect(identity: Identity, address: str | None = None, engine: Engine | None = None) -> Client:
    """Registered client over TCP (``host:port``) or against an in-process engine."""
    if engine is not None:
        transport = LocalTransport(engine)
    else:
        transport = TcpTransport(*parse_address(address))
    c = Client(identity, transport)
    c.register()
    return c


__all__ = [
    "ALL_OPERATORS", "Client", "Consumer", "ConsumerGrant", "DKR_CHAIN_CAP", "GrantUnion",
    "LocalTransport", "OPEN_EPOCH_CHUNKS", "OPERATORS", "Owner", "PlaintextAccess", "Producer",
    "StatResult", "TcpTransport", "connect", "decrypt_multi_stream", "encode_dkr_grant",
    "encode_token_grant", "grant_aad", "parse_address",
]
