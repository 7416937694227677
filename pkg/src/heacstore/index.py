"""Server-side k-ary time-partitioned aggregation tree over encrypted digests.

Node ``(level, position)`` covers chunks ``[position * k**level, (position + 1) * k**level)``.
A stored node at level >= 1 holds the digests of its complete children (one
row per child), so a level-1 node holds chunk digests.  Level-0 nodes are the
chunk digests themselves and live inside their parents.  Nodes are addressed
by arithmetic alone: ``idx/{uuid}/{level}/{position}``.

Inserts are append-only.  A node is rewritten whenever a child completes;
the parent learns a child only once the child's subtree is full, so readers
never see a partial aggregate.
"""

from __future__ import annotations

import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import (BelowRetainedResolution, InvalidRange, LayoutMismatch, MissingNode,
                     OutOfOrder, SpanMismatch, UnalignedRange)
from .heac import EncryptedDigest
from .kvstore import KvStore


def node_key(uuid: str, level: int, position: int) -> str:
    return f"idx/{uuid}/{level}/{position}"


def chunk_key(uuid: str, i: int) -> str:
    return f"chk/{uuid}/{i}"


@dataclass(frozen=True, order=True)
class NodeId:
    uuid: str
    level: int
    position: int

    def span(self, fanout: int) -> tuple[int, int]:
        w = fanout ** self.level
        return self.position * w, (self.position + 1) * w

    @property
    def key(self) -> str:
        return node_key(self.uuid, self.level, self.position)


@dataclass(frozen=True)
class NodeRead:
    """Child slots ``[lo, hi)`` of one stored node."""

    level: int
    position: int
    lo: int
    hi: int

    def span(self, fanout: int) -> tuple[int, int]:
        w = fanout ** (self.level - 1)
        base = self.position * fanout * w
        return base + self.lo * w, base + self.hi * w

    @property
    def digests(self) -> int:
        return self.hi - self.lo


@dataclass(frozen=True)
class QueryPlan:
    reads: tuple[NodeRead, ...]
    span: tuple[int, int]

    @property
    def digest_count(self) -> int:
        return sum(r.digests for r in self.reads)


def read_bound(fanout: int, n: int) -> int:
    """Worst-case digests folded for one range query over ``n`` chunks."""
    levels, cap = 0, 1
    while cap < n:
        cap *= fanout
        levels += 1
    return 2 * (fanout - 1) * max(levels, 1) + 1


def decompose_range(i: int, j: int, fanout: int, n: int) -> QueryPlan:
    """Split ``[i, j)`` into maximal aligned complete subtrees, left to right.

    Each level contributes at most one partial read at either end, so the
    fold touches at most ``2 (k-1) ceil(log_k n) + 1`` digests.
    """
    if not 0 <= i < j <= n:
        raise InvalidRange(f"[{i}, {j}) not inside stored range [0, {n})")
    k = fanout
    left, right = [], []
    level, lo, hi = 1, i, j
    while lo < hi:
        if lo % k == 0 and hi % k == 0:
            lo, hi, level = lo // k, hi // k, level + 1
            continue
        if lo // k == (hi - 1) // k:
            p = lo // k
            left.append(NodeRead(level, p, lo - p * k, hi - p * k))
            break
        if lo % k:
            left.append(NodeRead(level, lo // k, lo % k, k))
            lo = (lo // k + 1) * k
        if hi % k:
            right.append(NodeRead(level, hi // k, 0, hi % k))
            hi = (hi // k) * k
    return QueryPlan(tuple(left + right[::-1]), (i, j))


class NodeCache:
    """Byte-bounded LRU of decoded index nodes, shared across streams."""

    def __init__(self, max_bytes: int = 1 << 20):
        self.max_bytes = max_bytes
        self._items: OrderedDict[str, np.ndarray] = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()
        self.hits = self.misses = 0

    def get(self, key: str):
        with self._lock:
            arr = self._items.get(key)
            if arr is None:
                self.misses += 1
                return None
            self._items.move_to_end(key)
            self.hits += 1
            return arr

    def put(self, key: str, arr: np.ndarray):
        with self._lock:
            old = self._items.pop(key, None)
            if old is not None:
                self._bytes -= old.nbytes
            if arr.nbytes > self.max_bytes:
                return
            self._items[key] = arr
            self._bytes += arr.nbytes
            while self._bytes > self.max_bytes:
                _, ev = self._items.popitem(last=False)
                self._bytes -= ev.nbytes

    def discard(self, key: str):
        with self._lock:
            old = self._items.pop(key, None)
            if old is not None:
                self._bytes -= old.nbytes

    def discard_prefix(self, prefix: str):
        with self._lock:
            for k in [k for k in self._items if k.startswith(prefix)]:
                self._bytes -= self._items.pop(k).nbytes


def encode_node(rows: np.ndarray) -> bytes:
    return struct.pack(">I", len(rows)) + rows.astype(">u8").tobytes()


def decode_node(data: bytes, n_slots: int) -> np.ndarray:
    (filled,) = struct.unpack_from(">I", data)
    if len(data) != 4 + filled * n_slots * 8:
        raise MissingNode("stored node has inconsistent length")
    return np.frombuffer(data, dtype=">u8", offset=4).astype(np.uint64).reshape(filled, n_slots)


@dataclass
class IndexStats:
    node_reads: int = 0
    digest_reads: int = 0
    node_writes: int = 0


@dataclass
class Retention:
    """Chunk range ``[start, end)`` rolled up to ``stride`` chunks."""

    start: int
    end: int
    stride: int


class EncryptedIndex:
    """Aggregation tree for one stream, persisted in a :class:`KvStore`."""

    def __init__(self, store: KvStore, uuid: str, fanout: int, n_slots: int,
                 n: int = 0, cache: NodeCache | None = None):
        self.store = store
        self.uuid = uuid
        self.fanout = fanout
        self.n_slots = n_slots
        self.n = n
        self.cache = cache if cache is not None else NodeCache()
        self.stats = IndexStats()
        self._lock = threading.Lock()
        self.retention = self._load_retention()

    # storage ---------------------------------------------------------------

    def _key(self, level: int, position: int) -> str:
        return node_key(self.uuid, level, position)

    def _load(self, level: int, position: int) -> np.ndarray | None:
        key = self._key(level, position)
        rows = self.cache.get(key)
        if rows is None:
            raw = self.store.get(key)
            if raw is None:
                return None
            rows = decode_node(raw, self.n_slots)
            self.cache.put(key, rows)
        self.stats.node_reads += 1
        return rows

    def _save(self, level: int, position: int, rows: np.ndarray):
        key = self._key(level, position)
        self.store.put(key, encode_node(rows))
        self.cache.put(key, rows)
        self.stats.node_writes += 1

    def node(self, node_id: NodeId) -> np.ndarray | None:
        """Child digests stored at ``node_id`` (one row per complete child)."""
        return self._load(node_id.level, node_id.position)

    def _retention_key(self) -> str:
        return f"idx/{self.uuid}/retention"

    def _load_retention(self) -> list[Retention]:
        raw = self.store.get(self._retention_key())
        if not raw:
            return []
        vals = struct.unpack(f">{len(raw) // 8}Q", raw)
        return [Retention(*vals[o:o + 3]) for o in range(0, len(vals), 3)]

    def _save_retention(self):
        flat = [v for r in self.retention for v in (r.start, r.end, r.stride)]
        self.store.put(self._retention_key(), struct.pack(f">{len(flat)}Q", *flat))

    # writes ----------------------------------------------------------------

    def insert_digest(self, i: int, digest: EncryptedDigest) -> int:
        """Append the digest of chunk ``i``; returns the number of node writes."""
        with self._lock:
            if i != self.n:
                raise OutOfOrder(f"chunk {i} inserted, expected {self.n}")
            if len(digest.slots) != self.n_slots:
                raise LayoutMismatch(f"{len(digest.slots)} slots, index holds {self.n_slots}")
            if digest.span != (i, i + 1):
                raise SpanMismatch(f"leaf digest spans {digest.span}, expected [{i}, {i + 1})")
            k = self.fanout
            row, level, pos, writes = digest.slots, 1, i, 0
            while True:
                parent, c = divmod(pos, k)
                rows = self._load(level, parent) if c else None
                if c and (rows is None or len(rows) != c):
                    raise MissingNode(f"node {level}/{parent} missing or out of step")
                rows = row[None, :] if rows is None else np.vstack((rows, row))
                self._save(level, parent, rows)
                writes += 1
                if c != k - 1:
                    break
                row, pos, level = rows.sum(axis=0, dtype=np.uint64), parent, level + 1
            self.n += 1
            return writes

    def rollup(self, stride: int, start: int, end: int) -> int:
        """Drop every digest finer than ``stride`` chunks inside ``[start, end)``.

        ``stride`` must be a power of the fanout and the range aligned to it.
        Returns the number of deleted nodes.
        """
        k = self.fanout
        level, w = 0, 1
        while w < stride:
            w *= k
            level += 1
        if w != stride:
            raise UnalignedRange(f"stride {stride} is not a power of fanout {k}")
        if start % stride or end % stride or not 0 <= start < end <= self.n:
            raise UnalignedRange(f"[{start}, {end}) not aligned to {stride} inside [0, {self.n})")
        if level == 0:
            return 0
        deleted = 0
        with self._lock:
            for lv in range(1, level + 1):
                size = k ** lv
                for pos in range(start // size, end // size):
                    key = self._key(lv, pos)
                    if self.store.get(key) is not None:
                        self.store.delete(key)
                        deleted += 1
                    self.cache.discard(key)
            self.retention.append(Retention(start, end, stride))
            self._save_retention()
        return deleted

    # reads -----------------------------------------------------------------

    def check_resolution(self, i: int, j: int):
        for r in self.retention:
            for x in (i, j):
                if r.start < x < r.end and x % r.stride:
                    raise BelowRetainedResolution(
                        f"boundary {x} finer than retained stride {r.stride} in [{r.start}, {r.end})")

    def is_rolled_up(self, i: int) -> bool:
        return any(r.start <= i < r.end and r.stride > 1 for r in self.retention)

    def plan(self, i: int, j: int) -> QueryPlan:
        return decompose_range(i, j, self.fanout, self.n)

    def query_range(self, i: int, j: int) -> EncryptedDigest:
        """Fold of every chunk digest in ``[i, j)``, answered from the fewest nodes."""
        n = self.n
        if not 0 <= i < j <= n:
            raise InvalidRange(f"[{i}, {j}) not inside stored range [0, {n})")
        self.check_resolution(i, j)
        plan = decompose_range(i, j, self.fanout, n)
        acc = np.zeros(self.n_slots, dtype=np.uint64)
        for r in plan.reads:
            rows = self._load(r.level, r.position)
            if rows is None or len(rows) < r.hi:
                raise MissingNode(f"node {r.level}/{r.position} lacks children [{r.lo}, {r.hi})")
            acc += rows[r.lo:r.hi].sum(axis=0, dtype=np.uint64)
            self.stats.digest_reads += r.digests
        return EncryptedDigest(acc, (i, j))

    def leaf_digest(self, i: int) -> EncryptedDigest:
        return self.query_range(i, i + 1)


def delete_range(store: KvStore, uuid: str, i: int, j: int) -> int:
    """Remove sealed payloads of chunks ``[i, j)``; index digests stay queryable."""
    removed = 0
    for x in range(i, j):
        key = chunk_key(uuid, x)
        if store.get(key) is not None:
            store.delete(key)
            removed += 1
    return removed
