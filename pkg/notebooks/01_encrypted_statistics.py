"""Walk-through: store a heart-rate stream encrypted, then ask for statistics.

Run with ``python notebooks/01_encrypted_statistics.py``. Everything runs in
process; the server engine only ever sees ciphertext digests.
"""

import uuid

import numpy as np

from heacstore.bench import mhealth_layout
from heacstore.chunking import StreamConfig
from heacstore.client import Consumer, Owner, connect
from heacstore.identity import Identity
from heacstore.server import Engine

# An owner connects to an in-process engine and registers a stream of 10 s chunks.
engine = Engine()
alice = connect(Identity("alice"), engine=engine)
cfg = StreamConfig(uuid.uuid4(), t0=0, delta=10_000, layout=mhealth_layout(), fanout=16)
owner = Owner(alice, cfg)
owner.create_stream()

# One hour of 1 Hz heart-rate samples. The producer seals each chunk with a
# fresh payload key and an additively homomorphic digest.
rng = np.random.default_rng(0)
ts = np.arange(0, 3_600_000, 1_000)
hr = (70 + 10 * np.sin(ts / 600_000) + rng.normal(0, 3, ts.size)).astype(int)
producer = owner.producer()
producer.produce_many(ts, hr)
producer.flush()

# The server folds encrypted digests; only the owner's keys open the result.
# Mean and variance come back as exact fractions.
reader = Consumer(alice)
reader.add_grant(owner.full_access())
stats = reader.query_stats(cfg.uuid, 0, 3_600_000)
print(f"count={stats.count} mean={float(stats.mean):.2f} (numpy {hr.mean():.2f})")
print(f"variance={float(stats.variance):.2f} (numpy {hr.var():.2f})")

# A coarser view: one aggregate per ten minutes.
for k, window in enumerate(reader.query_view(cfg.uuid, 0, 3_600_000, 600_000)):
    print(f"  {10 * k:3d} min  mean {float(window.mean):6.2f}")
