"""Client-side chunk construction: digests, compression, payload sealing.

Points of one ``delta``-long interval form a chunk.  The chunk payload is
serialised, compressed and sealed with AES-GCM under a key derived from the
chunk's two payload-keystream masks; the digest (sum, count, sum of squares,
histogram) is encrypted slot by slot with the homomorphic cipher.
"""

from __future__ import annotations

import functools
import os
import struct
import uuid as uuidlib
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthFailure, BeforeEpoch, CorruptStream, LayoutMismatch, MixedChunk
from .heac import MASK64, DigestLayout, EncryptedDigest, decode_signed, lm_hash_many
from .keytree import (DEFAULT_HEIGHT, KeyDerivationTree, LeafDeriver, NodeLabel,
                      chunk_payload_key, slot_secrets_concat)

PAYLOAD_TAG = 0
NONCE_BYTES = 12
CODECS = {"none": 0, "deflate": 1}
_CODEC_NAMES = {v: k for k, v in CODECS.items()}
_POINT_DTYPE = np.dtype([("t", "<i8"), ("v", "<i8")])


class DataPoint(NamedTuple):
    timestamp: int
    value: int


def slot_tags(layout: DigestLayout) -> list[int]:
    """Keystream tags: the payload keystream first, then one per digest slot."""
    return list(_tags(layout))


@functools.lru_cache(maxsize=64)
def _tags(layout: DigestLayout) -> tuple[int, ...]:
    return (PAYLOAD_TAG,) + tuple(1 + s for s in range(len(layout)))


@dataclass(frozen=True)
class StreamConfig:
    uuid: uuidlib.UUID
    t0: int
    delta: int
    layout: DigestLayout = field(default_factory=DigestLayout)
    codec: str = "deflate"
    height: int = DEFAULT_HEIGHT
    fanout: int = 64

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("chunk interval must be positive")
        if self.fanout < 2:
            raise ValueError("index fanout must be >= 2")
        if self.codec not in CODECS:
            raise ValueError(f"unknown codec {self.codec!r}")

    def chunk_start(self, i: int) -> int:
        return self.t0 + i * self.delta

    def to_bytes(self) -> bytes:
        edges = self.layout.bin_boundaries
        return (self.uuid.bytes
                + struct.pack(">qqBBHH", self.t0, self.delta, CODECS[self.codec], self.height,
                              self.fanout, len(edges))
                + struct.pack(f">{len(edges)}q", *edges))

    @classmethod
    def from_bytes(cls, data: bytes) -> "StreamConfig":
        u = uuidlib.UUID(bytes=bytes(data[:16]))
        t0, delta, codec, height, fanout, nb = struct.unpack_from(">qqBBHH", data, 16)
        edges = struct.unpack_from(f">{nb}q", data, 16 + struct.calcsize(">qqBBHH"))
        if codec not in _CODEC_NAMES:
            raise CorruptStream(f"unknown codec id {codec}")
        return cls(u, t0, delta, DigestLayout(edges), _CODEC_NAMES[codec], height, fanout)


def assign_chunk_index(t: int, cfg: StreamConfig) -> int:
    if t < cfg.t0:
        raise BeforeEpoch(f"timestamp {t} precedes stream epoch {cfg.t0}")
    return (t - cfg.t0) // cfg.delta


@dataclass(frozen=True)
class PlainDigest:
    sum: int
    count: int
    sumsq: int
    bins: tuple[int, ...] = ()

    def to_slots(self) -> np.ndarray:
        vals = [self.sum, self.count, self.sumsq, *self.bins]
        return np.array([v & MASK64 for v in vals], dtype=np.uint64)

    def to_bytes(self) -> bytes:
        return self.to_slots().astype(">u8").tobytes()

    @classmethod
    def from_slots(cls, slots: Sequence[int]) -> "PlainDigest":
        s = [int(x) & MASK64 for x in slots]
        return cls(decode_signed(s[0]), s[1], s[2], tuple(s[3:]))

    def __add__(self, other: "PlainDigest") -> "PlainDigest":
        return PlainDigest.from_slots(self.to_slots() + other.to_slots())


def _arrays(points) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(points, tuple) and len(points) == 2 and isinstance(points[0], np.ndarray):
        return points[0].astype(np.int64, copy=False), points[1].astype(np.int64, copy=False)
    if len(points) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    arr = np.array([(p[0], p[1]) for p in points], dtype=np.int64)
    return arr[:, 0], arr[:, 1]


def build_digest(points, layout: DigestLayout) -> PlainDigest:
    """Plain statistics of one chunk; sums wrap mod 2^64 like the ciphertexts do."""
    _, vals = _arrays(points)
    u = vals.astype(np.uint64)
    total = int(u.sum(dtype=np.uint64)) if len(u) else 0
    sumsq = int((u * u).sum(dtype=np.uint64)) if len(u) else 0
    bins: tuple[int, ...] = ()
    if layout.bin_count:
        edges = np.array(layout.bin_boundaries, dtype=np.int64)
        idx = np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, layout.bin_count - 1)
        bins = tuple(int(c) for c in np.bincount(idx, minlength=layout.bin_count))
    return PlainDigest(decode_signed(total), len(vals), sumsq, bins)


def serialize_points(points) -> bytes:
    """4-byte count, then (timestamp, value) pairs; all little-endian."""
    ts, vs = _arrays(points)
    arr = np.empty(len(ts), dtype=_POINT_DTYPE)
    arr["t"], arr["v"] = ts, vs
    return struct.pack("<I", len(ts)) + arr.tobytes()


def deserialize_points(data: bytes) -> list[DataPoint]:
    if len(data) < 4:
        raise CorruptStream("point block shorter than its header")
    (n,) = struct.unpack_from("<I", data)
    if len(data) != 4 + n * _POINT_DTYPE.itemsize:
        raise CorruptStream(f"point block length does not match count {n}")
    arr = np.frombuffer(data, dtype=_POINT_DTYPE, offset=4)
    return [DataPoint(int(t), int(v)) for t, v in zip(arr["t"], arr["v"])]


def compress(data: bytes, codec: str = "deflate") -> bytes:
    if codec == "deflate":
        return b"\x01" + zlib.compress(data, 6)
    if codec == "none":
        return b"\x00" + data
    raise ValueError(f"unknown codec {codec!r}")


def decompress(data: bytes) -> bytes:
    if not data:
        raise CorruptStream("empty compressed block")
    codec, body = data[0], data[1:]
    if codec == 0:
        return bytes(body)
    if codec == 1:
        try:
            return zlib.decompress(body)
        except zlib.error as e:
            raise CorruptStream(str(e)) from None
    raise CorruptStream(f"unknown codec id {codec}")


class TreeKeys:
    """Producer key source: per-chunk mask vectors straight from the root secret."""

    plaintext = False

    def __init__(self, tree: KeyDerivationTree, layout: DigestLayout):
        self.tree = tree
        self.tags = _tags(layout)
        self._deriver = LeafDeriver(tree.root_secret, NodeLabel(0), tree.height)
        self._cache: dict[int, np.ndarray] = {}

    def masks(self, i: int) -> np.ndarray:
        """Masks of keystream position ``i``: payload first, then the digest slots."""
        m = self._cache.get(i)
        if m is None:
            leaf = self._deriver.leaf_secret(i)
            m = lm_hash_many(slot_secrets_concat(leaf, self.tags))
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[i] = m
        return m


class NullKeys:
    """Identity masking for the plaintext baseline; every mask is zero."""

    plaintext = True

    def __init__(self, layout: DigestLayout):
        self._zeros = np.zeros(len(layout) + 1, dtype=np.uint64)

    def masks(self, i: int) -> np.ndarray:
        return self._zeros


def masks_from_leaf(leaf: bytes, layout: DigestLayout) -> np.ndarray:
    return lm_hash_many(slot_secrets_concat(leaf, _tags(layout)))


@dataclass(frozen=True)
class SealedChunk:
    index: int
    nonce: bytes
    payload: bytes
    digest: EncryptedDigest

    def to_bytes(self) -> bytes:
        d = self.digest.to_bytes()
        return (struct.pack(">QI", self.index, len(self.nonce)) + self.nonce
                + struct.pack(">I", len(self.payload)) + self.payload
                + struct.pack(">I", len(d)) + d)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedChunk":
        try:
            i, nlen = struct.unpack_from(">QI", data, 0)
            off = 12
            nonce = bytes(data[off:off + nlen])
            off += nlen
            (plen,) = struct.unpack_from(">I", data, off)
            payload = bytes(data[off + 4:off + 4 + plen])
            off += 4 + plen
            (dlen,) = struct.unpack_from(">I", data, off)
            dbytes = bytes(data[off + 4:off + 4 + dlen])
        except struct.error as e:
            raise CorruptStream(f"truncated sealed chunk: {e}") from None
        if off + 4 + dlen != len(data) or len(nonce) != nlen or len(payload) != plen:
            raise CorruptStream("sealed chunk length fields inconsistent")
        return cls(i, nonce, payload, EncryptedDigest.from_bytes(dbytes, (i, i + 1)))


def _aad(cfg: StreamConfig, i: int) -> bytes:
    return cfg.uuid.bytes + struct.pack(">Q", i)


def seal_chunk(points, cfg: StreamConfig, keys, index: int | None = None) -> SealedChunk:
    """Seal the points of one chunk; ``index`` is required only for an empty chunk."""
    ts, vs = _arrays(points)
    if len(ts):
        lo, hi = int(ts.min()), int(ts.max())
        i = assign_chunk_index(lo, cfg)
        if assign_chunk_index(hi, cfg) != i or (index is not None and index != i):
            raise MixedChunk(f"points span chunk indices {i}..{assign_chunk_index(hi, cfg)}")
    elif index is None:
        raise MixedChunk("an empty chunk needs an explicit index")
    else:
        i = index
    m_i, m_next = keys.masks(i), keys.masks(i + 1)
    digest = build_digest((ts, vs), cfg.layout)
    enc = EncryptedDigest(digest.to_slots() + m_i[1:] - m_next[1:], (i, i + 1))
    body = compress(serialize_points((ts, vs)), cfg.codec)
    if keys.plaintext:
        return SealedChunk(i, b"", body, enc)
    nonce = os.urandom(NONCE_BYTES)
    key = chunk_payload_key(int(m_i[0]), int(m_next[0]))
    return SealedChunk(i, nonce, AESGCM(key).encrypt(nonce, body, _aad(cfg, i)), enc)


def open_chunk(sealed: SealedChunk, cfg: StreamConfig, masks_i, masks_next) -> list[DataPoint]:
    """Recover the points of a sealed chunk.

    ``masks_i``/``masks_next`` are the leaf secrets of positions i and i+1, or
    their already-derived mask vectors.  Pass ``None`` for both to open a
    plaintext-baseline chunk.
    """
    if isinstance(masks_i, bytes):
        masks_i = masks_from_leaf(masks_i, cfg.layout)
    if isinstance(masks_next, bytes):
        masks_next = masks_from_leaf(masks_next, cfg.layout)
    if masks_i is None or masks_next is None:
        if sealed.nonce:
            raise AuthFailure("encrypted chunk opened without keys")
        return deserialize_points(decompress(sealed.payload))
    if not sealed.nonce:
        raise AuthFailure("expected an encrypted payload")
    key = chunk_payload_key(int(masks_i[0]), int(masks_next[0]))
    try:
        body = AESGCM(key).decrypt(sealed.nonce, sealed.payload, _aad(cfg, sealed.index))
    except InvalidTag:
        raise AuthFailure(f"chunk {sealed.index} failed authentication") from None
    return deserialize_points(decompress(body))


def decrypt_digest(enc: EncryptedDigest, masks_i, masks_j) -> PlainDigest:
    """Decrypt an aggregate over ``[i, j)`` given the full mask vectors at ``i`` and ``j``."""
    if len(masks_i) != len(enc.slots) + 1:
        raise LayoutMismatch("mask vector does not match digest layout")
    return PlainDigest.from_slots(enc.slots - masks_i[1:] + masks_j[1:])
