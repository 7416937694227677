"""GGM-style binary key-derivation tree.

Every node holds a 128-bit secret.  The children of a node with secret ``x``
are ``G_0(x) = AES_x(0)`` and ``G_1(x) = AES_x(1)``; leaf ``t`` of a height-``h``
tree is reached by following the bits of ``t`` from the most significant one.
Leaves form the time-indexed keystream.  An inner node (an *access token*)
lets its holder derive exactly the leaves of its subtree.

Below each leaf, one extra PRP step keyed by the leaf secret separates the
keystreams of the individual digest slots and of the payload key, so a token
set grants every slot at once.
"""

from __future__ import annotations

import functools
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable

from ._aes import aes_block, aes_blocks, aes_ecb, aes_walk, aes_walk_path
from .errors import IndexOutOfRange, InvalidRange
from .heac import MASK64

SECRET_BYTES = 16
DEFAULT_HEIGHT = 30

_BLOCK0 = bytes(16)
_BLOCK1 = bytes(15) + b"\x01"
_SLOT_DOMAIN = 1 << 127
PAYLOAD_KEY_PREFIX = b"heacstore/chunk-payload/v1"


class PrpCounter:
    """Counts keyed PRP invocations (one per key schedule)."""

    def __init__(self):
        self.calls = 0

    def reset(self) -> int:
        n, self.calls = self.calls, 0
        return n


PRP_COUNTER = PrpCounter()


def _prp(key: bytes, block: bytes) -> bytes:
    PRP_COUNTER.calls += 1
    return aes_block(key, block)


def prg_expand(parent: bytes) -> tuple[bytes, bytes]:
    """Length-doubling PRG: ``(AES_parent(0), AES_parent(1))``."""
    PRP_COUNTER.calls += 1
    left, right = aes_blocks(parent, (_BLOCK0, _BLOCK1))
    return left, right


def prg_left(parent: bytes) -> bytes:
    """``prg_expand(parent)[0]`` with a single PRP call."""
    return _prp(parent, _BLOCK0)


def prg_right(parent: bytes) -> bytes:
    """``prg_expand(parent)[1]`` with a single PRP call."""
    return _prp(parent, _BLOCK1)


def _slot_block(tag: int) -> bytes:
    return (_SLOT_DOMAIN | tag).to_bytes(16, "big")


def slot_secret(leaf: bytes, slot_tag: int) -> bytes:
    return _prp(leaf, _slot_block(slot_tag))


@functools.lru_cache(maxsize=64)
def _slot_blocks(tags: tuple[int, ...]) -> bytes:
    return b"".join(_slot_block(t) for t in tags)


def slot_secrets_concat(leaf: bytes, slot_tags: Iterable[int]) -> bytes:
    """All slot-tagged secrets below one leaf, concatenated, under a single key schedule."""
    PRP_COUNTER.calls += 1
    return aes_ecb(leaf, _slot_blocks(tuple(slot_tags)))


def slot_secrets(leaf: bytes, slot_tags: Iterable[int]) -> list[bytes]:
    data = slot_secrets_concat(leaf, slot_tags)
    return [data[o:o + 16] for o in range(0, len(data), 16)]


def _walk(secret: bytes, path: int, nbits: int) -> bytes:
    PRP_COUNTER.calls += nbits
    return aes_walk(secret, path, nbits, _BLOCK0, _BLOCK1)


@dataclass(frozen=True, order=True)
class NodeLabel:
    """Bitstring naming a tree node; ``depth`` bits of ``path``, root is depth 0."""

    depth: int
    path: int = 0

    def __post_init__(self):
        if self.depth < 0 or self.path < 0 or self.path >> self.depth:
            raise ValueError(f"invalid label depth={self.depth} path={self.path}")

    @classmethod
    def parse(cls, bits: str) -> "NodeLabel":
        return cls(len(bits), int(bits, 2) if bits else 0)

    def __str__(self) -> str:
        return format(self.path, f"0{self.depth}b") if self.depth else ""

    def child(self, bit: int) -> "NodeLabel":
        return NodeLabel(self.depth + 1, (self.path << 1) | bit)

    def sibling(self) -> "NodeLabel":
        if self.depth == 0:
            raise ValueError("root has no sibling")
        return NodeLabel(self.depth, self.path ^ 1)

    def leaves(self, height: int) -> range:
        shift = height - self.depth
        return range(self.path << shift, (self.path + 1) << shift)

    def to_bytes(self) -> bytes:
        nbytes = (self.depth + 7) // 8
        packed = (self.path << (8 * nbytes - self.depth)).to_bytes(nbytes, "big") if nbytes else b""
        return bytes([self.depth]) + packed

    @classmethod
    def read(cls, data: bytes, off: int = 0) -> tuple["NodeLabel", int]:
        depth = data[off]
        nbytes = (depth + 7) // 8
        raw = int.from_bytes(data[off + 1:off + 1 + nbytes], "big")
        return cls(depth, raw >> (8 * nbytes - depth)), off + 1 + nbytes


@dataclass(frozen=True)
class KeyDerivationTree:
    root_secret: bytes = field(repr=False)
    height: int = DEFAULT_HEIGHT
    stream_id: bytes = b""

    def __post_init__(self):
        if len(self.root_secret) != SECRET_BYTES:
            raise ValueError("root secret must be 16 bytes")
        if not 1 <= self.height <= 62:
            raise ValueError("tree height must be in [1, 62]")

    @property
    def size(self) -> int:
        return 1 << self.height

    def node_secret(self, label: NodeLabel) -> bytes:
        if label.depth > self.height:
            raise IndexOutOfRange(f"label deeper than tree height {self.height}")
        return _walk(self.root_secret, label.path, label.depth)

    def leaf_secret(self, t: int) -> bytes:
        if not 0 <= t < self.size:
            raise IndexOutOfRange(f"leaf {t} outside [0, 2^{self.height})")
        return _walk(self.root_secret, t, self.height)


def derive_leaf(tree: KeyDerivationTree, t: int, slot_tag: int) -> bytes:
    """Slot-tagged secret of leaf ``t``: ``h`` PRP steps down, one slot step below."""
    return slot_secret(tree.leaf_secret(t), slot_tag)


@dataclass(frozen=True)
class AccessToken:
    label: NodeLabel
    secret: bytes = field(repr=False)

    def to_bytes(self) -> bytes:
        return self.label.to_bytes() + self.secret


@dataclass(frozen=True)
class AccessTokenSet:
    """Subtree roots whose leaves are exactly ``granted_range``."""

    tokens: tuple[AccessToken, ...]
    granted_range: tuple[int, int]
    height: int

    def __contains__(self, t: int) -> bool:
        return self.granted_range[0] <= t < self.granted_range[1]

    def token_for(self, t: int) -> AccessToken:
        for tok in self.tokens:
            shift = self.height - tok.label.depth
            if t >> shift == tok.label.path:
                return tok
        raise IndexOutOfRange(f"leaf {t} not covered by this token set")

    def leaf_secret(self, t: int) -> bytes:
        tok = self.token_for(t)
        depth = self.height - tok.label.depth
        return _walk(tok.secret, t & ((1 << depth) - 1), depth)

    def to_bytes(self) -> bytes:
        body = b"".join(tok.to_bytes() for tok in self.tokens)
        i, j = self.granted_range
        return struct.pack(">H", len(self.tokens)) + body + struct.pack(">QQ", i, j)

    @classmethod
    def from_bytes(cls, data: bytes, height: int) -> "AccessTokenSet":
        (count,) = struct.unpack_from(">H", data, 0)
        off, toks = 2, []
        for _ in range(count):
            label, off = NodeLabel.read(data, off)
            toks.append(AccessToken(label, bytes(data[off:off + SECRET_BYTES])))
            off += SECRET_BYTES
        i, j = struct.unpack_from(">QQ", data, off)
        if off + 16 != len(data):
            raise ValueError("trailing bytes after token set")
        return cls(tuple(toks), (i, j), height)


def cover_labels(height: int, i: int, j: int) -> list[NodeLabel]:
    """Canonical minimal cover of leaves ``[i, j)`` by maximal aligned subtrees."""
    if not 0 <= i < j <= 1 << height:
        raise InvalidRange(f"[{i}, {j}) is not a non-empty range inside [0, 2^{height})")
    labels = []
    while i < j:
        size = i & -i if i else 1 << height
        while i + size > j:
            size >>= 1
        level = size.bit_length() - 1
        labels.append(NodeLabel(height - level, i >> level))
        i += size
    return labels


def range_cover(tree: KeyDerivationTree, i: int, j: int) -> AccessTokenSet:
    labels = cover_labels(tree.height, i, j)
    toks = tuple(AccessToken(lb, tree.node_secret(lb)) for lb in labels)
    return AccessTokenSet(toks, (i, j), tree.height)


def expand_tokens(tokens: AccessTokenSet, slot_tag: int | None) -> dict[int, bytes]:
    """Every leaf of the granted range mapped to its (slot-tagged) secret.

    Subtrees are expanded level by level with ``prg_expand``.  ``slot_tag=None``
    returns the untagged leaf secrets.
    """
    out = {}
    for tok in tokens.tokens:
        layer = [tok.secret]
        for _ in range(tokens.height - tok.label.depth):
            nxt = []
            for s in layer:
                nxt.extend(prg_expand(s))
            layer = nxt
        for t, s in zip(tok.label.leaves(tokens.height), layer):
            out[t] = s if slot_tag is None else slot_secret(s, slot_tag)
    return out


# below this many levels, per-level calls beat one recorded native walk
_SHORT_WALK = 3


class LeafDeriver:
    """Derives leaf secrets below one subtree root, caching the last root-to-leaf path.

    Consecutive leaves share all but a few path nodes, so sequential derivation
    costs O(1) PRP calls amortised instead of O(h).  The levels below the
    divergence point are recomputed in one native walk.
    """

    def __init__(self, secret: bytes, label: NodeLabel, height: int):
        self.label = label
        self.height = height
        self._depth = height - label.depth
        self._base = label.path << self._depth
        self._last = None
        self._path = [secret] + [b""] * self._depth

    def leaf_secret(self, t: int) -> bytes:
        rel = t - self._base
        if not 0 <= rel < 1 << self._depth:
            raise IndexOutOfRange(f"leaf {t} outside subtree {self.label}")
        d = self._depth
        if self._last == rel:
            return self._path[d]
        common = 0 if self._last is None else d - (rel ^ self._last).bit_length()
        nbits = d - common
        path = self._path
        if nbits > _SHORT_WALK:
            PRP_COUNTER.calls += nbits
            nodes = aes_walk_path(path[common], rel & ((1 << nbits) - 1), nbits, _BLOCK0, _BLOCK1)
            path[common + 1:] = [nodes[o:o + 16] for o in range(0, 16 * nbits, 16)]
        else:
            for level in range(common, d):
                bit = (rel >> (d - 1 - level)) & 1
                path[level + 1] = _prp(path[level], _BLOCK1 if bit else _BLOCK0)
        self._last = rel
        return self._path[d]


def chunk_payload_key(k_i: int, k_next: int) -> bytes:
    """128-bit AEAD key for a chunk payload: SHA-256 of the key difference, truncated."""
    diff = (k_i - k_next) & MASK64
    return hashlib.sha256(PAYLOAD_KEY_PREFIX + diff.to_bytes(8, "big")).digest()[:16]
