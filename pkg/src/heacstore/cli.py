"""``heacstore`` command line: serve, stream admin, CSV ingest, queries, grants, bench.

Client state lives in a home directory (``--home`` or ``$HEACSTORE_HOME``):
``identity.json`` holds the principal's private keys and ``streams/`` the root
secrets of streams this principal owns.  Nothing in it is ever sent to the
server.  ``--embedded`` runs the server engine in-process over ``--data-dir``
instead of connecting to ``$HEACSTORE_SERVER``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
import uuid as uuidlib
from pathlib import Path

import numpy as np

from .bench import MODES, run_bench, view_latency, view_ratios
from .chunking import StreamConfig
from .client import OPERATORS, Client, Consumer, LocalTransport, Owner, TcpTransport, parse_address
from .errors import HeacStoreError
from .heac import DigestLayout
from .identity import Identity, PublicIdentity
from .kvstore import FileKvStore
from .server import Engine, TcpServer, load_server_config

DEFAULT_SERVER = "127.0.0.1:7070"
_UNITS = {"ms": 1, "s": 1000, "m": 60_000, "h": 3_600_000, "d": 86_400_000}


def parse_duration(text: str) -> int:
    """``"10s"`` -> 10000; a bare number is milliseconds."""
    m = re.fullmatch(r"\s*(\d+)\s*(ms|s|m|h|d)?\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad duration {text!r} (try 500ms, 10s, 5m, 1h, 1d)")
    return int(m.group(1)) * _UNITS[m.group(2) or "ms"]


def parse_bins(text: str) -> DigestLayout:
    """``start:width:count`` uniform histogram, or ``none``."""
    if text == "none":
        return DigestLayout()
    try:
        start, width, count = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("bins must be start:width:count or none") from None
    return DigestLayout.uniform(start, width, count)


class Session:
    """Identity, local stream secrets and a connected client for one invocation."""

    def __init__(self, args):
        self.args = args
        self.home = Path(args.home)
        ident_path = self.home / "identity.json"
        if ident_path.exists():
            self.identity = Identity.load(ident_path)
        else:
            self.identity = Identity(args.principal or os.environ.get("USER", "principal"))
            self.identity.save(ident_path)
        if args.embedded:
            self.store = FileKvStore(Path(args.data_dir) / "store.log")
            transport = LocalTransport(Engine(self.store))
        else:
            self.store = None
            transport = TcpTransport(*parse_address(args.server))
        self.client = Client(self.identity, transport)
        self.client.register()

    def close(self):
        self.client.close()
        if self.store is not None:
            self.store.close()

    def _secret_path(self, u: uuidlib.UUID) -> Path:
        return self.home / "streams" / f"{u}.json"

    def save_owner(self, owner: Owner):
        p = self._secret_path(owner.cfg.uuid)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps({"config": owner.cfg.to_bytes().hex(),
                                 "root": owner.root_secret.hex(), "plaintext": owner.plaintext}))
        p.chmod(0o600)

    def owner(self, u: uuidlib.UUID) -> Owner | None:
        p = self._secret_path(u)
        if not p.exists():
            return None
        doc = json.loads(p.read_text())
        return Owner(self.client, StreamConfig.from_bytes(bytes.fromhex(doc["config"])),
                     bytes.fromhex(doc["root"]), plaintext=doc.get("plaintext", False))

    def consumer(self, u: uuidlib.UUID) -> Consumer:
        c = Consumer(self.client)
        own = self.owner(u)
        if own is not None:
            c.configs[u] = own.cfg
            c.add_grant(own.full_access())
        else:
            c.load_grants(u)
        return c


def _emit(args, human: str, payload: dict):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


def read_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    """``timestamp_ms,value`` rows; a non-numeric first row is taken as a header."""
    ts, vs = [], []
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh)):
            if not row or row[0].startswith("#"):
                continue
            try:
                t, v = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                if n == 0:
                    continue
                raise HeacStoreError(f"{path}:{n + 1}: expected timestamp_ms,value") from None
            ts.append(t)
            vs.append(v)
    order = np.argsort(np.array(ts, dtype=np.int64), kind="stable")
    return np.array(ts, dtype=np.int64)[order], np.array(vs, dtype=np.int64)[order]


# commands -------------------------------------------------------------------


def cmd_serve(args):
    if args.config:
        cfg = load_server_config(args.config)
        listen, data_dir, cache = cfg.listen, cfg.data_dir, cfg.cache_bytes
    else:
        listen, data_dir, cache = parse_address(args.listen), Path(args.data_dir), args.cache_bytes
    store = FileKvStore(Path(data_dir or args.data_dir) / "store.log")
    server = TcpServer(Engine(store, cache), listen)
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        store.close()
    return 0


def cmd_identity(args):
    s = Session(args)
    pub = s.identity.public
    doc = {"principal_id": pub.principal_id, "sign_pub": pub.sign_pub.hex(), "kex_pub": pub.kex_pub.hex()}
    if args.export:
        Path(args.export).write_text(json.dumps(doc))
    _emit(args, f"{pub.principal_id} sign={doc['sign_pub'][:16]}.. kex={doc['kex_pub'][:16]}..", doc)
    s.close()
    return 0


def cmd_create_stream(args):
    s = Session(args)
    u = uuidlib.UUID(args.uuid) if args.uuid else uuidlib.uuid4()
    cfg = StreamConfig(u, args.t0, args.delta, args.bins, args.codec, args.height, args.fanout)
    owner = Owner(s.client, cfg, plaintext=args.plaintext)
    owner.create_stream()
    s.save_owner(owner)
    _emit(args, str(u), {"stream": str(u), "delta_ms": args.delta, "fanout": args.fanout})
    s.close()
    return 0


def _owner_or_fail(s: Session, u: uuidlib.UUID) -> Owner:
    owner = s.owner(u)
    if owner is None:
        raise HeacStoreError(f"no local root secret for stream {u}; only its owner can do this")
    return owner


def cmd_ingest(args):
    s = Session(args)
    owner = _owner_or_fail(s, args.stream)
    ts, vs = read_csv(args.file)
    producer = owner.producer()
    producer.produce_many(ts, vs)
    if len(ts):
        producer.flush()
    _emit(args, f"ingested {len(ts)} points into {producer.uploaded} chunks",
          {"points": len(ts), "chunks": producer.uploaded, "next_index": producer.next_index})
    s.close()
    return 0


def cmd_query(args):
    s = Session(args)
    res = s.consumer(args.stream).query_stats(args.stream, args.start, args.end)
    d = res.as_dict()
    ops = list(OPERATORS) if args.op == "all" else [args.op]
    keys = {"var": "variance", "hist": "histogram", "min": "min_bin", "max": "max_bin"}
    out = {op: d[keys.get(op, op)] for op in ops}
    _emit(args, "\n".join(f"{k}\t{v}" for k, v in out.items()), out)
    s.close()
    return 0


def cmd_raw(args):
    s = Session(args)
    pts = s.consumer(args.stream).query_raw(args.stream, args.start, args.end)
    if args.json:
        for p in pts:
            print(json.dumps({"timestamp": p.timestamp, "value": p.value}))
    else:
        for p in pts:
            print(f"{p.timestamp},{p.value}")
    s.close()
    return 0


def _load_public(path: str) -> PublicIdentity:
    doc = json.loads(Path(path).read_text())
    return PublicIdentity(doc["principal_id"], bytes.fromhex(doc["sign_pub"]), bytes.fromhex(doc["kex_pub"]))


def cmd_grant(args):
    s = Session(args)
    owner = _owner_or_fail(s, args.stream)
    pub = _load_public(args.principal_key)
    res = args.res or owner.cfg.delta
    if args.open:
        seq = owner.grant_open(pub, args.start, res)
    else:
        if args.end is None:
            raise HeacStoreError("--to is required unless --open is given")
        seq = owner.grant(pub, args.start, args.end, res)
    stride = res // owner.cfg.delta
    _emit(args, f"granted {pub.principal_id} stride {stride} (entry {seq})",
          {"principal": pub.principal_id, "stride": stride, "entry": seq, "open": args.open})
    s.close()
    return 0


def cmd_revoke(args):
    s = Session(args)
    owner = _owner_or_fail(s, args.stream)
    dropped = owner.revoke(args.grantee, args.at)
    _emit(args, f"revoked {args.grantee} from {args.at} ({dropped} pending entries dropped)",
          {"principal": args.grantee, "end": args.at, "dropped": dropped})
    s.close()
    return 0


def cmd_rollup(args):
    s = Session(args)
    _owner_or_fail(s, args.stream)
    deleted = s.client.rollup_stream(args.stream, args.res, args.start, args.end)
    _emit(args, f"rolled up; {deleted} index nodes deleted", {"deleted_nodes": deleted})
    s.close()
    return 0


def cmd_bench(args):
    modes = MODES if args.mode == "both" else (args.mode,)
    address = parse_address(args.server) if args.remote else None
    for mode in modes:
        rep = run_bench(mode, workers=args.workers, points=args.points, delta=args.delta,
                        read_ratio=args.read_ratio, min_duration=args.duration,
                        embedded=not args.tcp, address=address, seed=args.seed)
        _emit(args, (f"{rep.mode}: ingest {rep.ingest_points_per_s:,.0f} pts/s, "
                     f"query {rep.query_ops_per_s:,.0f} ops/s, p50/p95/p99 "
                     f"{rep.p50_us:.0f}/{rep.p95_us:.0f}/{rep.p99_us:.0f} us "
                     f"({rep.rounds} rounds, {rep.window_s:.1f} s steady state)"), rep.as_dict())
    if args.view:
        results = view_latency(seed=args.seed)
        for g, ratio in view_ratios(results):
            _emit(args, f"view granularity {g // 1000} s: encrypted/plaintext {ratio:.3f}",
                  {"granularity_ms": g, "ratio": ratio})
    return 0


# parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heacstore", description=__doc__.splitlines()[0])
    p.add_argument("--server", default=os.environ.get("HEACSTORE_SERVER", DEFAULT_SERVER),
                   help="host:port of the server (env HEACSTORE_SERVER)")
    p.add_argument("--home", default=os.environ.get("HEACSTORE_HOME", ".heacstore"),
                   help="client state directory (env HEACSTORE_HOME)")
    p.add_argument("--principal", help="principal id used when creating a new identity")
    p.add_argument("--embedded", action="store_true", help="run the engine in-process over --data-dir")
    p.add_argument("--data-dir", default="heacstore-data")
    p.add_argument("--json", action="store_true", help="machine-readable JSON lines")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def stream_arg(sp):
        sp.add_argument("--stream", type=uuidlib.UUID, required=True)

    def span_args(sp, end_required=True):
        sp.add_argument("--from", dest="start", type=parse_duration, required=True, help="ms or 10s/5m/..")
        sp.add_argument("--to", dest="end", type=parse_duration, required=end_required)

    sp = sub.add_parser("serve", help="run the TCP server")
    sp.add_argument("--config", help="file of key = value lines (listen, data_dir, cache_bytes)")
    sp.add_argument("--listen", default=DEFAULT_SERVER)
    sp.add_argument("--cache-bytes", type=int, default=1 << 20)
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("identity", help="show or export this principal's public keys")
    sp.add_argument("--export", help="write the public identity JSON here")
    sp.set_defaults(func=cmd_identity)

    sp = sub.add_parser("create-stream", help="register a new stream owned by this principal")
    sp.add_argument("--uuid")
    sp.add_argument("--t0", type=int, default=0, help="epoch in ms")
    sp.add_argument("--delta", type=parse_duration, default=10_000, help="chunk interval")
    sp.add_argument("--bins", type=parse_bins, default=DigestLayout(), help="start:width:count or none")
    sp.add_argument("--codec", choices=["deflate", "none"], default="deflate")
    sp.add_argument("--height", type=int, default=30)
    sp.add_argument("--fanout", type=int, default=64)
    sp.add_argument("--plaintext", action="store_true", help="baseline mode: no encryption")
    sp.set_defaults(func=cmd_create_stream)

    sp = sub.add_parser("ingest", help="append a timestamp_ms,value CSV")
    stream_arg(sp)
    sp.add_argument("--file", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("query", help="statistics over an aligned time range")
    stream_arg(sp)
    span_args(sp)
    sp.add_argument("--op", choices=["all", *OPERATORS], default="all")
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("raw", help="decrypted points of a time range")
    stream_arg(sp)
    span_args(sp)
    sp.set_defaults(func=cmd_raw)

    sp = sub.add_parser("grant", help="share a time range with another principal")
    stream_arg(sp)
    span_args(sp, end_required=False)
    sp.add_argument("--principal-key", required=True, help="public identity JSON of the grantee")
    sp.add_argument("--res", type=parse_duration, help="resolution, a multiple of the chunk interval")
    sp.add_argument("--open", action="store_true", help="open-ended subscription from --from")
    sp.set_defaults(func=cmd_grant)

    sp = sub.add_parser("revoke", help="stop extending a principal's access")
    stream_arg(sp)
    sp.add_argument("--principal", dest="grantee", required=True, help="principal to revoke")
    sp.add_argument("--at", type=parse_duration, required=True)
    sp.set_defaults(func=cmd_revoke)

    sp = sub.add_parser("rollup", help="keep only coarse aggregates for a range")
    stream_arg(sp)
    span_args(sp)
    sp.add_argument("--res", type=parse_duration, required=True)
    sp.set_defaults(func=cmd_rollup)

    sp = sub.add_parser("bench", help="throughput and latency, encrypted vs plaintext baseline")
    sp.add_argument("--mode", choices=["both", *MODES], default="both")
    sp.add_argument("--workers", type=int, default=8)
    sp.add_argument("--points", type=int, default=1_000_000)
    sp.add_argument("--delta", type=parse_duration, default=10_000)
    sp.add_argument("--read-ratio", type=int, default=4)
    sp.add_argument("--duration", type=float, default=30.0, help="minimum steady-state seconds")
    sp.add_argument("--tcp", action="store_true", help="private TCP server instead of in-process")
    sp.add_argument("--remote", action="store_true", help="benchmark the server at --server")
    sp.add_argument("--view", action="store_true", help="also measure dashboard view latency")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except HeacStoreError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (ConnectionError, OSError) as e:
        print(f"error: cannot reach server: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
