import uuid

import pytest

from heacstore.chunking import StreamConfig
from heacstore.client import Consumer, Owner, connect
from heacstore.heac import DigestLayout
from heacstore.identity import Identity
from heacstore.server import Engine

DELTA = 10_000
T0 = 1_600_000_000_000


def make_config(**kw):
    kw.setdefault("layout", DigestLayout.uniform(0, 100, 10))
    kw.setdefault("fanout", 4)
    return StreamConfig(kw.pop("uuid", uuid.uuid4()), kw.pop("t0", T0), kw.pop("delta", DELTA), **kw)


@pytest.fixture
def engine():
    return Engine()


@pytest.fixture
def alice(engine):
    return connect(Identity("alice"), engine=engine)


@pytest.fixture
def bob(engine):
    return connect(Identity("bob"), engine=engine)


@pytest.fixture
def owner(alice):
    o = Owner(alice, make_config())
    o.create_stream()
    return o


def fill(owner, values, per_chunk=1):
    """Write ``values`` as ``per_chunk`` points per chunk, evenly spaced; returns their timestamps."""
    cfg = owner.cfg
    step = cfg.delta // per_chunk
    ts = [cfg.t0 + k * step for k in range(len(values))]
    p = owner.producer()
    p.produce_many(ts, values)
    p.flush()
    return ts


def reader(client):
    return Consumer(client)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, line in sorted(results):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {line}")
