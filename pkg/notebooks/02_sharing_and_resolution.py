"""Walk-through: share a time range, optionally only at a coarse resolution.

Run with ``python notebooks/02_sharing_and_resolution.py``.
"""

import uuid

import numpy as np

from heacstore.bench import mhealth_layout
from heacstore.chunking import StreamConfig
from heacstore.client import Consumer, Owner, connect
from heacstore.errors import HeacStoreError
from heacstore.identity import Identity
from heacstore.server import Engine

engine = Engine()
alice = connect(Identity("alice"), engine=engine)
doctor = connect(Identity("doctor"), engine=engine)
insurer = connect(Identity("insurer"), engine=engine)

cfg = StreamConfig(uuid.uuid4(), t0=0, delta=10_000, layout=mhealth_layout(), fanout=16)
owner = Owner(alice, cfg)
owner.create_stream()
ts = np.arange(0, 7_200_000, 2_000)
producer = owner.producer()
producer.produce_many(ts, 60 + (ts // 60_000) % 40)
producer.flush()

# The doctor gets the first hour at full resolution: key-tree tokens for that range.
owner.grant(doctor.identity.public, 0, 3_600_000)
# The insurer gets both hours, but only in 10-minute aggregates: a key-regression share.
owner.grant(insurer.identity.public, 0, 7_200_000, 600_000)

doc, ins = Consumer(doctor), Consumer(insurer)
doc.load_grants(cfg.uuid)
ins.load_grants(cfg.uuid)

print("doctor, 0-30 min mean:", round(float(doc.query_stats(cfg.uuid, 0, 1_800_000).mean), 2))
print("insurer, 0-2 h mean:  ", round(float(ins.query_stats(cfg.uuid, 0, 7_200_000).mean), 2))


def attempt(label, fn):
    try:
        fn()
        print(f"{label}: allowed")
    except HeacStoreError as e:
        print(f"{label}: refused ({type(e).__name__})")


attempt("doctor reads the second hour", lambda: doc.query_stats(cfg.uuid, 3_600_000, 7_200_000))
attempt("insurer asks for a 1-minute window", lambda: ins.query_stats(cfg.uuid, 0, 60_000))
attempt("insurer asks for raw points", lambda: ins.query_raw(cfg.uuid, 0, 600_000))
attempt("doctor reads raw points", lambda: doc.query_raw(cfg.uuid, 0, 20_000))
