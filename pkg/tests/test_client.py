"""Producer, owner grants and consumer queries end to end over an in-process engine."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heacstore.chunking import DataPoint, build_digest, masks_from_leaf, open_chunk
from heacstore.client import (Consumer, ConsumerGrant, GrantUnion, Owner, StatResult, connect,
                              decrypt_multi_stream)
from heacstore.errors import (LateArrival, MissingEnvelope, MissingGrant, OutsideGrant,
                              UnalignedForResolution, UnalignedResolution)
from heacstore.identity import Identity
from heacstore.keytree import range_cover
from heacstore.server import Engine

from conftest import DELTA, T0, fill, make_config


def stats_of(values, layout):
    return StatResult.from_digest(build_digest([DataPoint(0, v) for v in values], layout), layout)


class TestProducer:
    def test_gap_seals_empty_chunks(self, owner, alice):
        p = owner.producer()
        p.produce(T0 + 5, 1)
        p.produce(T0 + 3 * DELTA, 2)
        assert p.uploaded == 3
        p.flush()
        assert alice.stream_info(owner.cfg.uuid)[1] == 4
        chunks, _ = alice.get_range(owner.cfg.uuid, T0, T0 + 4 * DELTA)
        g = owner.full_access()
        counts = [len(open_chunk(c, owner.cfg, g.masks(c.index), g.masks(c.index + 1)))
                  for c in chunks]
        assert counts == [1, 0, 0, 1]

    def test_late_arrival(self, owner):
        p = owner.producer()
        p.produce(T0 + DELTA, 1)
        p.produce(T0 + DELTA + 1, 1)
        p.produce(T0 + 2 * DELTA, 1)
        with pytest.raises(LateArrival):
            p.produce(T0 + DELTA + 2, 1)
        with pytest.raises(LateArrival):
            p.produce_many([T0 + 3 * DELTA, T0 + 2 * DELTA + 5], [1, 1])

    def test_flush_closes_chunk(self, owner):
        p = owner.producer()
        p.produce(T0, 1)
        p.flush()
        with pytest.raises(LateArrival):
            p.produce(T0 + 1, 1)

    def test_advance_to(self, owner, alice):
        p = owner.producer()
        p.advance_to(T0 + 5 * DELTA)
        assert alice.stream_info(owner.cfg.uuid)[1] == 5

    def test_resume_from_server_index(self, owner):
        fill(owner, [1, 2])
        assert owner.producer().next_index == 2


class TestStats:
    def test_worked_example(self, owner):
        fill(owner, [1, 2, 3], per_chunk=3)
        res = Consumer(owner.client)
        res.add_grant(owner.full_access())
        s = res.query_stats(owner.cfg.uuid, T0, T0 + DELTA)
        assert s.mean == 2 and s.variance == Fraction(2, 3)
        assert (s.sum, s.count) == (6, 3)

    def test_empty_range(self, owner):
        fill(owner, [0] * 3)
        p = owner.producer()
        p.advance_to(T0 + 6 * DELTA)
        c = Consumer(owner.client)
        c.add_grant(owner.full_access())
        s = c.query_stats(owner.cfg.uuid, T0 + 4 * DELTA, T0 + 6 * DELTA)
        assert s.count == 0 and not s.mean_defined and s.mean is None and s.min_bin is None

    def test_min_max_bins(self, owner):
        fill(owner, [15, 250, 260, 999])
        c = Consumer(owner.client)
        c.add_grant(owner.full_access())
        s = c.query_stats(owner.cfg.uuid, T0, T0 + 4 * DELTA)
        assert s.min_bin == (0, 100, 1)
        assert s.max_bin == (900, 1000, 1)
        assert s.histogram[2] == 2

    @settings(max_examples=15, deadline=None)
    @given(st.lists(st.integers(-500, 1500), min_size=1, max_size=40), st.data())
    def test_matches_plaintext_oracle(self, values, data):
        eng = Engine()
        o = Owner(connect(Identity("o"), engine=eng), make_config())
        o.create_stream()
        fill(o, values)
        i = data.draw(st.integers(0, len(values) - 1))
        j = data.draw(st.integers(i + 1, len(values)))
        c = Consumer(o.client)
        c.add_grant(o.full_access())
        s = c.query_stats(o.cfg.uuid, T0 + i * DELTA, T0 + j * DELTA)
        assert s == stats_of(values[i:j], o.cfg.layout)

    def test_as_dict(self):
        d = StatResult(6, 3, 14, (3, 0), (0, 10, 20)).as_dict()
        assert d["mean"] == 2.0 and d["min_bin"] == [0, 10, 3] and d["max_bin"] == [0, 10, 3]


class TestFullResolutionGrants:
    def test_grant_range_only(self, owner, bob):
        fill(owner, list(range(10)))
        owner.grant(bob.identity.public, T0 + 2 * DELTA, T0 + 6 * DELTA)
        c = Consumer(bob)
        (g,) = c.load_grants(owner.cfg.uuid)
        assert (g.start, g.end, g.stride) == (2, 6, 1)
        assert c.query_stats(owner.cfg.uuid, T0 + 3 * DELTA, T0 + 6 * DELTA).sum == 3 + 4 + 5
        with pytest.raises(OutsideGrant):
            c.query_stats(owner.cfg.uuid, T0 + 1 * DELTA, T0 + 4 * DELTA)
        with pytest.raises(OutsideGrant):
            g.leaf_secret(7)

    def test_query_raw_clips(self, owner, bob):
        fill(owner, list(range(20)), per_chunk=4)
        owner.grant(bob.identity.public, T0, T0 + 5 * DELTA)
        c = Consumer(bob)
        c.load_grants(owner.cfg.uuid)
        pts = c.query_raw(owner.cfg.uuid, T0 + DELTA // 2, T0 + DELTA + 1)
        assert [p.value for p in pts] == [2, 3, 4]

    def test_missing_grant(self, owner, bob):
        fill(owner, [1])
        c = Consumer(bob)
        c.configs[owner.cfg.uuid] = owner.cfg
        with pytest.raises(MissingGrant):
            c.query_stats(owner.cfg.uuid, T0, T0 + DELTA)

    def test_token_count_for_dyadic_block(self, owner):
        # covering chunks [0, 2^k - 1) reaches boundaries 0 .. 2^k - 1, one subtree
        assert len(range_cover(owner.tree, 0, 8).tokens) == 1


class TestResolutionGrants:
    def test_stride_six_envelopes_and_share(self, engine, owner, bob):
        fill(owner, list(range(36)))
        owner.grant(bob.identity.public, T0, T0 + 36 * DELTA, res=6 * DELTA)
        keys = [k for k, _ in engine.store.scan(f"env/{owner.cfg.uuid}/6/")]
        assert [int(k.rsplit("/", 1)[1], 16) for k in keys] == list(range(7))
        c = Consumer(bob)
        (g,) = c.load_grants(owner.cfg.uuid)
        assert (g.share.lower, g.share.upper, g.stride) == (0, 6, 6)
        s = c.query_stats(owner.cfg.uuid, T0 + 6 * DELTA, T0 + 18 * DELTA)
        assert s.sum == sum(range(6, 18))
        with pytest.raises(UnalignedForResolution):
            c.query_stats(owner.cfg.uuid, T0 + 6 * DELTA, T0 + 7 * DELTA)

    def test_resolution_grant_cannot_read_raw(self, owner, bob):
        fill(owner, list(range(12)))
        owner.grant(bob.identity.public, T0, T0 + 12 * DELTA, res=4 * DELTA)
        c = Consumer(bob)
        c.load_grants(owner.cfg.uuid)
        with pytest.raises(OutsideGrant):
            c.query_raw(owner.cfg.uuid, T0, T0 + 4 * DELTA)

    @pytest.mark.parametrize("res,start,end", [(15_000, T0, T0 + 30_000), (20_000, T0 + DELTA, T0 + 50_000),
                                               (0, T0, T0 + DELTA)])
    def test_unaligned_resolution(self, owner, bob, res, start, end):
        with pytest.raises(UnalignedResolution):
            owner.make_grant(bob.identity.public, start, end, res)

    def test_view_windows(self, owner, bob):
        vals = list(range(24))
        fill(owner, vals)
        owner.grant(bob.identity.public, T0, T0 + 24 * DELTA, res=4 * DELTA)
        c = Consumer(bob)
        c.load_grants(owner.cfg.uuid)
        view = c.query_view(owner.cfg.uuid, T0, T0 + 24 * DELTA, 8 * DELTA)
        assert [s.sum for s in view] == [sum(vals[k:k + 8]) for k in range(0, 24, 8)]

    def test_missing_envelope(self, owner):
        d = owner.dkr(2)
        g = ConsumerGrant(owner.cfg.uuid, owner.cfg, 0, 8, 2, share=d.share(0, 4))
        with pytest.raises(MissingEnvelope):
            g.leaf_secret(4)

    def test_owner_dkr_deterministic(self, alice):
        cfg = make_config()
        a, b = Owner(alice, cfg, bytes(16)), Owner(alice, cfg, bytes(16))
        assert a.dkr(4).key(3) == b.dkr(4).key(3)
        assert a.dkr(4).key(3) != a.dkr(8).key(3)


class TestMultiStream:
    def _streams(self, alice, k, values):
        owners = []
        for n in range(k):
            o = Owner(alice, make_config())
            o.create_stream()
            fill(o, [v + n for v in values])
            owners.append(o)
        return owners

    def test_combined_stats(self, alice, bob):
        owners = self._streams(alice, 3, [1, 2, 3, 4])
        c = Consumer(bob)
        for o in owners:
            o.grant(bob.identity.public, T0, T0 + 4 * DELTA)
            c.load_grants(o.cfg.uuid)
        s = c.query_multi_stats([o.cfg.uuid for o in owners], T0, T0 + 4 * DELTA)
        assert s.sum == 10 + 14 + 18 and s.count == 12

    def test_missing_one_grant(self, alice, bob):
        owners = self._streams(alice, 2, [1, 2])
        c = Consumer(bob)
        owners[0].grant(bob.identity.public, T0, T0 + 2 * DELTA)
        c.load_grants(owners[0].cfg.uuid)
        c.configs[owners[1].cfg.uuid] = owners[1].cfg
        with pytest.raises(MissingGrant):
            c.query_multi_stats([o.cfg.uuid for o in owners], T0, T0 + 2 * DELTA)

    def test_decrypt_requires_every_grant(self, alice):
        owners = self._streams(alice, 2, [5])
        _, combined = alice.get_stat_range([o.cfg.uuid for o in owners], T0, T0 + DELTA, combine=True)
        spans = {o.cfg.uuid: (0, 1) for o in owners}
        with pytest.raises(MissingGrant):
            decrypt_multi_stream({owners[0].cfg.uuid: owners[0].full_access()}, spans, combined)
        full = {o.cfg.uuid: o.full_access() for o in owners}
        assert decrypt_multi_stream(full, spans, combined).sum == 11


class TestOpenGrants:
    def test_subscription_extends_then_revocation_stops(self, engine, alice, bob):
        o = Owner(alice, make_config(), epoch_chunks=4)
        o.create_stream()
        o.grant_open(bob.identity.public, T0)
        fill(o, list(range(12)))
        o.extend_open_grants(T0 + 8 * DELTA - 1)
        c = Consumer(bob)
        c.load_grants(o.cfg.uuid)
        assert c.query_stats(o.cfg.uuid, T0, T0 + 8 * DELTA).sum == sum(range(8))
        o.revoke("bob", T0 + 8 * DELTA)
        p = o.producer()
        p.produce_many(np.arange(12, 16) * DELTA + T0, range(12, 16))
        p.flush()
        assert o.extend_open_grants(T0 + 16 * DELTA) == 0
        c.load_grants(o.cfg.uuid)
        with pytest.raises(OutsideGrant):
            c.query_stats(o.cfg.uuid, T0 + 8 * DELTA, T0 + 12 * DELTA)
        for g in c.grants[o.cfg.uuid]:
            with pytest.raises(OutsideGrant):
                g.leaf_secret(12)

    def test_open_grant_with_resolution(self, alice, bob):
        o = Owner(alice, make_config(), epoch_chunks=5)
        o.create_stream()
        o.grant_open(bob.identity.public, T0, res=2 * DELTA)
        entries, _ = bob.fetch_grants(o.cfg.uuid)
        assert [(e.start, e.end, e.res) for e in entries] == [(T0, T0 + 6 * DELTA, 2 * DELTA)]


class TestGrantUnion:
    def _grants(self, owner, spans):
        return [ConsumerGrant(owner.cfg.uuid, owner.cfg, a, b, 1, tokens=range_cover(owner.tree, a, b + 1))
                for a, b in spans]

    def test_adjacent_grants_join(self, owner):
        u = GrantUnion(self._grants(owner, [(4, 8), (0, 4)]))
        assert u.covers(1, 8) and u.aligned(1, 8)
        for x in (0, 4, 6, 8):
            assert (u.masks(x) == masks_from_leaf(owner.tree.leaf_secret(x), owner.cfg.layout)).all()
        with pytest.raises(OutsideGrant):
            u.masks(9)

    def test_gap_not_covered(self, owner):
        u = GrantUnion(self._grants(owner, [(0, 4), (5, 8)]))
        assert not u.covers(0, 8)
        assert u.covers(5, 7)
        with pytest.raises(OutsideGrant):
            u.check(2, 6)


class TestPlaintextBaseline:
    def test_zero_masks_roundtrip(self, alice):
        o = Owner(alice, make_config(), plaintext=True)
        o.create_stream()
        fill(o, [4, 5, 6], per_chunk=3)
        c = Consumer(alice)
        c.add_grant(o.full_access())
        assert c.query_stats(o.cfg.uuid, T0, T0 + DELTA).sum == 15
        assert [p.value for p in c.query_raw(o.cfg.uuid, T0, T0 + DELTA)] == [4, 5, 6]
