"""Desk-scale benchmarks: mixed ingest/query throughput and dashboard-view latency.

Both run once in ``encrypted`` mode and once in ``plaintext-baseline`` mode.
The baseline swaps the masks for zeros and skips the payload AEAD; every other
code path (framing, signatures, index, compression) is shared, so the ratio of
the two isolates the cost of the cryptography.
"""

from __future__ import annotations

import os
import threading
import time
import uuid as uuidlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .chunking import StreamConfig
from .client import Client, Consumer, ConsumerGrant, LocalTransport, Owner, PlaintextAccess, TcpTransport
from .heac import DigestLayout
from .identity import Identity
from .keytree import range_cover
from .server import Engine, TcpServer

MODES = ("encrypted", "plaintext-baseline")
DAY_MS = 86_400_000


@dataclass
class BenchReport:
    mode: str
    workers: int
    rounds: int
    window_s: float
    points: int
    queries: int
    ingest_points_per_s: float
    query_ops_per_s: float
    p50_us: float
    p95_us: float
    p99_us: float
    inserts_per_round: int
    queries_per_round: int

    def as_dict(self) -> dict:
        return asdict(self)


def mhealth_layout() -> DigestLayout:
    """Ten 20-bpm bins over [0, 200) for heart-rate style readings."""
    return DigestLayout.uniform(0, 20, 10)


def synth_mhealth(rng: np.random.Generator, t0: int, n: int, rate_hz: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Heart-rate like signal: slow drift plus noise, sampled at ``rate_hz``."""
    step = 1000 // rate_hz
    ts = t0 + np.arange(n, dtype=np.int64) * step
    drift = 90 + 25 * np.sin(ts / 3.6e6 * 2 * np.pi)
    vs = np.clip(np.rint(drift + rng.normal(0, 8, n)), 30, 199).astype(np.int64)
    return ts, vs


class _Target:
    """Hands out one transport per worker: in-process, an existing server, or a private TCP server."""

    def __init__(self, embedded: bool, address: tuple[str, int] | None):
        self.engine = None
        self.server = None
        if address is not None:
            self.address = address
        else:
            self.engine = Engine(cache_bytes=16 << 20)
            if not embedded:
                self.server = TcpServer(self.engine).start()
                self.address = self.server.address
        self.embedded = embedded and address is None

    def client(self, identity: Identity) -> Client:
        t = LocalTransport(self.engine) if self.embedded else TcpTransport(*self.address)
        c = Client(identity, t)
        c.register()
        return c

    def close(self):
        if self.server is not None:
            self.server.shutdown()
            self.server.server_close()


def _access(owner: Owner, n_chunks: int):
    if owner.plaintext:
        return PlaintextAccess(owner.cfg.uuid, owner.cfg)
    tokens = range_cover(owner.tree, 0, n_chunks + 1)
    return ConsumerGrant(owner.cfg.uuid, owner.cfg, 0, n_chunks, 1, tokens=tokens)


@dataclass
class _Ops:
    inserts: list = field(default_factory=list)   # (end_time, points)
    queries: list = field(default_factory=list)   # (end_time, latency_s)
    errors: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


def _worker(ops: "_Ops", barrier, *args):
    try:
        _run_worker(ops, barrier, *args)
    except BaseException as e:  # surfaced by run_bench after join
        ops.errors.append(e)
        barrier.abort()


def _run_worker(ops: "_Ops", barrier, target: _Target, mode: str, seed: int, round_no: int, w: int, points: int,
            delta: int, rate_hz: int, read_ratio: int, fanout: int):
    rng = np.random.default_rng([seed, round_no, w])
    per_chunk = delta * rate_hz // 1000
    n_chunks = points // per_chunk
    ts, vs = synth_mhealth(rng, 0, n_chunks * per_chunk, rate_hz)
    ident = Identity(f"bench-{round_no}-{w}")
    client = target.client(ident)
    cfg = StreamConfig(uuidlib.UUID(bytes=rng.bytes(16)), 0, delta,
                       mhealth_layout(), fanout=fanout)
    owner = Owner(client, cfg, root_secret=rng.bytes(16), plaintext=(mode != "encrypted"))
    owner.create_stream()
    producer = owner.producer(next_index=0)
    consumer = Consumer(client)
    consumer.configs[cfg.uuid] = cfg
    consumer.add_grant(_access(owner, n_chunks))
    plan = [(int(a), int(b)) for a, b in rng.integers(0, 1 << 30, size=(n_chunks * read_ratio, 2))]
    barrier.wait()
    ins, qs = [], []
    for c in range(n_chunks):
        lo = c * per_chunk
        producer.produce_many(ts[lo:lo + per_chunk], vs[lo:lo + per_chunk])
        producer.flush()
        ins.append((time.perf_counter(), per_chunk))
        for a, b in plan[c * read_ratio:(c + 1) * read_ratio]:
            i = a % (c + 1)
            j = i + 1 + b % (c + 1 - i)
            t = time.perf_counter()
            consumer.query_stats(cfg.uuid, i * delta, j * delta)
            end = time.perf_counter()
            qs.append((end, end - t))
    client.close()
    with ops.lock:
        ops.inserts.extend(ins)
        ops.queries.extend(qs)


def run_bench(mode: str = "encrypted", workers: int = 8, points: int = 1_000_000,
              delta: int = 10_000, rate_hz: int = 50, read_ratio: int = 4,
              min_duration: float = 30.0, trim: float = 0.1, embedded: bool = True,
              address: tuple[str, int] | None = None, fanout: int = 64, seed: int = 0,
              max_rounds: int = 1000) -> BenchReport:
    """Mixed workload: each worker owns one stream and, per sealed chunk, runs
    ``read_ratio`` random range statistics queries over what it has written.

    The first and last ``trim`` fraction of each round are discarded as
    warm-up and cool-down.  Rounds repeat the same deterministic workload until
    the retained steady-state windows add up to ``min_duration`` seconds.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    per_worker = points // workers
    target = _Target(embedded, address)
    window = 0.0
    n_points = n_queries = 0
    latencies: list[float] = []
    rounds = inserts_per_round = queries_per_round = 0
    try:
        while rounds < max_rounds and (rounds == 0 or window < min_duration):
            ops = _Ops()
            barrier = threading.Barrier(workers + 1)
            threads = [threading.Thread(target=_worker, args=(
                ops, barrier, target, mode, seed, rounds, w, per_worker, delta, rate_hz, read_ratio, fanout,
                )) for w in range(workers)]
            for t in threads:
                t.start()
            try:
                barrier.wait()
            except threading.BrokenBarrierError:
                pass
            start = time.perf_counter()
            for t in threads:
                t.join()
            end = time.perf_counter()
            if ops.errors:
                raise ops.errors[0]
            inserts_per_round, queries_per_round = len(ops.inserts), len(ops.queries)
            lo, hi = start + trim * (end - start), end - trim * (end - start)
            window += hi - lo
            n_points += sum(p for t, p in ops.inserts if lo <= t < hi)
            kept = [lat for t, lat in ops.queries if lo <= t < hi]
            n_queries += len(kept)
            latencies.extend(kept)
            rounds += 1
    finally:
        target.close()
    lat_us = np.array(latencies) * 1e6 if latencies else np.zeros(1)
    p50, p95, p99 = (float(np.percentile(lat_us, q)) for q in (50, 95, 99))
    return BenchReport(mode, workers, rounds, window, n_points, n_queries,
                       n_points / window if window else 0.0, n_queries / window if window else 0.0,
                       p50, p95, p99, inserts_per_round, queries_per_round)


# dashboard view latency ---------------------------------------------------------


@dataclass
class ViewLatency:
    mode: str
    granularity_ms: int
    windows: int
    seconds: float


def _ingest_day(target: _Target, mode: str, seed: int, delta: int, rate_hz: int):
    rng = np.random.default_rng([seed, 7])
    ident = Identity(f"view-{mode}")
    client = target.client(ident)
    cfg = StreamConfig(uuidlib.UUID(bytes=os.urandom(16)), 0, delta, mhealth_layout())
    owner = Owner(client, cfg, root_secret=rng.bytes(16), plaintext=(mode != "encrypted"))
    owner.create_stream()
    producer = owner.producer(next_index=0)
    ts, vs = synth_mhealth(rng, 0, DAY_MS * rate_hz // 1000, rate_hz)
    producer.produce_many(ts, vs)
    producer.flush()
    return client, owner


def view_latency(granularities=(60_000, 600_000, 3_600_000, 21_600_000, DAY_MS),
                 delta: int = 10_000, rate_hz: int = 50, repeats: int = 5, embedded: bool = False,
                 seed: int = 0, min_time: float = 0.5) -> list[ViewLatency]:
    """Latency of rendering one day of data at each granularity, both modes.

    Each measurement starts from a fresh grant (no derived keys cached) and the
    minimum is reported over at least ``repeats`` runs, repeated further until
    ``min_time`` seconds have been spent on that cell.
    """
    target = _Target(embedded, None)
    out = []
    try:
        setups = {mode: _ingest_day(target, mode, seed, delta, rate_hz) for mode in MODES}
        for g in granularities:
            for mode, (client, owner) in setups.items():
                best, spent, runs = float("inf"), 0.0, 0
                while runs < repeats or spent < min_time:
                    consumer = Consumer(client)
                    consumer.configs[owner.cfg.uuid] = owner.cfg
                    consumer.add_grant(_access(owner, DAY_MS // delta))
                    t = time.perf_counter()
                    res = consumer.query_view(owner.cfg.uuid, 0, DAY_MS, g)
                    took = time.perf_counter() - t
                    best, spent, runs = min(best, took), spent + took, runs + 1
                out.append(ViewLatency(mode, g, len(res), best))
    finally:
        target.close()
    return out


def view_ratios(results: list[ViewLatency]) -> list[tuple[int, float]]:
    """``(granularity, encrypted / plaintext)`` ordered from finest to coarsest."""
    by = {(r.mode, r.granularity_ms): r.seconds for r in results}
    gs = sorted({r.granularity_ms for r in results})
    return [(g, by[("encrypted", g)] / by[("plaintext-baseline", g)]) for g in gs]
