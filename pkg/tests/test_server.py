"""Server engine behaviour through the signed client API."""

import dataclasses

import pytest

from heacstore.chunking import NullKeys, seal_chunk
from heacstore.client import Client, LocalTransport, Owner, connect
from heacstore.errors import (DuplicateStream, InvalidRange, LayoutMismatch, NotOwner, OutOfOrder,
                              UnalignedRange, UnknownPrincipal, UnknownStream)
from heacstore.heac import DigestLayout
from heacstore.identity import Identity
from heacstore.kvstore import FileKvStore
from heacstore.protocol import Op, Writer
from heacstore.server import Engine, load_server_config

from conftest import DELTA, T0, fill, make_config


class TestStreams:
    def test_create_and_info(self, owner, alice):
        cfg, n, who = alice.stream_info(owner.cfg.uuid)
        assert (cfg, n, who) == (owner.cfg, 0, "alice")

    def test_duplicate(self, owner):
        with pytest.raises(DuplicateStream):
            owner.create_stream()

    def test_delete_leaves_no_keys(self, engine, owner, alice, bob):
        fill(owner, [1, 2, 3])
        owner.grant(bob.identity.public, T0, T0 + 3 * DELTA)
        owner.grant(bob.identity.public, T0, T0 + 2 * DELTA, res=2 * DELTA)
        u = str(owner.cfg.uuid)
        assert any(u in k for k, _ in engine.store.items())
        alice.delete_stream(owner.cfg.uuid)
        assert not any(u in k for k, _ in engine.store.items())
        with pytest.raises(UnknownStream):
            alice.stream_info(owner.cfg.uuid)

    def test_only_owner_deletes(self, owner, bob):
        with pytest.raises(NotOwner):
            bob.delete_stream(owner.cfg.uuid)

    def test_unknown_stream(self, alice):
        with pytest.raises(UnknownStream):
            alice.stream_info(make_config().uuid)


class TestInsert:
    def test_replay_and_gap_rejected(self, owner, alice):
        p = owner.producer()
        p.produce(T0, 5)
        p.flush()
        stale = seal_chunk([], owner.cfg, owner.keys(), index=0)
        with pytest.raises(OutOfOrder):
            alice.insert_record(owner.cfg.uuid, stale)
        ahead = seal_chunk([], owner.cfg, owner.keys(), index=5)
        with pytest.raises(OutOfOrder):
            alice.insert_record(owner.cfg.uuid, ahead)

    def test_non_owner_insert(self, owner, bob):
        with pytest.raises(NotOwner):
            bob.insert_record(owner.cfg.uuid, seal_chunk([], owner.cfg, owner.keys(), index=0))

    def test_layout_enforced(self, owner, alice):
        lay = DigestLayout.uniform(0, 10, 2)
        other = dataclasses.replace(owner.cfg, layout=lay)
        with pytest.raises(LayoutMismatch):
            alice.insert_record(owner.cfg.uuid, seal_chunk([], other, NullKeys(lay), index=0))


class TestReads:
    def test_get_range_chunk_selection(self, owner, alice):
        fill(owner, [1, 2, 3, 4])
        u = owner.cfg.uuid
        chunks, rolled = alice.get_range(u, T0 + DELTA, T0 + 2 * DELTA)
        assert [c.index for c in chunks] == [1] and not rolled
        chunks, _ = alice.get_range(u, T0 + DELTA - 1, T0 + DELTA + 1)
        assert [c.index for c in chunks] == [0, 1]
        chunks, _ = alice.get_range(u, T0 + 3 * DELTA, T0 + 100 * DELTA)
        assert [c.index for c in chunks] == [3]

    def test_stat_range_requires_alignment(self, owner, alice):
        fill(owner, [1, 2])
        with pytest.raises(UnalignedRange):
            alice.get_stat_range([owner.cfg.uuid], T0 + 1, T0 + DELTA)
        with pytest.raises(InvalidRange):
            alice.get_stat_range([owner.cfg.uuid], T0, T0)
        with pytest.raises(InvalidRange):
            alice.get_stat_range([owner.cfg.uuid], T0, T0 + 3 * DELTA)

    def test_rollup_marks_range(self, owner, alice):
        fill(owner, list(range(16)))
        u = owner.cfg.uuid
        alice.rollup_stream(u, 4 * DELTA, T0, T0 + 16 * DELTA)
        chunks, rolled = alice.get_range(u, T0, T0 + 16 * DELTA)
        assert chunks == [] and rolled
        enc = alice.get_stat_range([u], T0, T0 + 4 * DELTA)[0][0][1]
        assert enc.span == (0, 4)
        with pytest.raises(UnalignedRange):
            alice.rollup_stream(u, 3 * DELTA, T0, T0 + 12 * DELTA)

    def test_delete_range_keeps_digests(self, owner, alice):
        fill(owner, [1, 2, 3, 4])
        u = owner.cfg.uuid
        assert alice.delete_range(u, T0, T0 + 2 * DELTA) == 2
        assert [c.index for c in alice.get_range(u, T0, T0 + 4 * DELTA)[0]] == [2, 3]
        alice.get_stat_range([u], T0, T0 + 4 * DELTA)
        with pytest.raises(UnalignedRange):
            alice.delete_range(u, T0 + 1, T0 + DELTA)

    def test_combine_requires_equal_layout(self, engine, alice):
        a, b = Owner(alice, make_config()), Owner(alice, make_config(delta=2 * DELTA))
        for o in (a, b):
            o.create_stream()
            fill(o, [1, 1])
        with pytest.raises(LayoutMismatch):
            alice.get_stat_range([a.cfg.uuid, b.cfg.uuid], T0, T0 + 2 * DELTA, combine=True)


class TestAuth:
    def test_replayed_counter(self, engine, alice):
        payload = Writer().uuid(make_config().uuid).getvalue()
        alice._counter = 10
        with pytest.raises(UnknownStream):
            alice.call(Op.STREAM_INFO, payload)
        alice._counter = 5
        with pytest.raises(NotOwner, match="replayed"):
            alice.call(Op.STREAM_INFO, payload)

    def test_new_session_restarts_counter(self, engine, alice):
        again = Client(alice.identity, LocalTransport(engine))
        with pytest.raises(UnknownStream):
            again.stream_info(make_config().uuid)

    def test_forged_signature(self, engine, alice):
        impostor = Client(Identity("alice"), LocalTransport(engine))
        with pytest.raises(NotOwner, match="signature"):
            impostor.stream_info(make_config().uuid)

    def test_reregister_other_keys(self, engine, alice):
        with pytest.raises(NotOwner):
            connect(Identity("alice"), engine=engine)

    def test_unregistered_sender(self, engine):
        c = Client(Identity("carol"), LocalTransport(engine))
        with pytest.raises(UnknownPrincipal):
            c.stream_info(make_config().uuid)


class TestGrantsStore:
    def test_grant_needs_known_principal(self, owner):
        stranger = Identity("stranger").public
        with pytest.raises(UnknownPrincipal):
            owner.grant(stranger, T0, T0 + DELTA)

    def test_only_owner_grants(self, engine, owner, bob):
        entry = owner.make_grant(bob.identity.public, T0, T0 + DELTA)
        with pytest.raises(NotOwner):
            bob.grant_access(entry)

    def test_revoke_drops_unissued_epochs(self, engine, alice, bob):
        o = Owner(alice, make_config(), epoch_chunks=4)
        o.create_stream()
        o.grant_open(bob.identity.public, T0)
        o.extend_open_grants(T0 + 10 * DELTA)
        entries, revoked = bob.fetch_grants(o.cfg.uuid)
        assert [(e.start, e.end) for e in entries] == [
            (T0 + k * 4 * DELTA, T0 + (k + 1) * 4 * DELTA) for k in range(3)]
        assert revoked is None
        assert alice.revoke_access(o.cfg.uuid, "bob", T0 + 4 * DELTA) == 2
        entries, revoked = bob.fetch_grants(o.cfg.uuid)
        assert len(entries) == 1 and revoked == T0 + 4 * DELTA
        with pytest.raises(InvalidRange, match="revoked"):
            alice.grant_access(o.make_grant(bob.identity.public, T0 + 8 * DELTA, T0 + 12 * DELTA),
                               open_ended=True)

    def test_grants_are_per_principal(self, engine, owner, alice, bob):
        owner.grant(bob.identity.public, T0, T0 + DELTA)
        assert alice.fetch_grants(owner.cfg.uuid) == ([], None)
        assert len(bob.fetch_grants(owner.cfg.uuid)[0]) == 1


class TestPersistence:
    def test_restart_from_log(self, tmp_path):
        path = tmp_path / "store.log"
        eng = Engine(FileKvStore(path))
        ident = Identity("alice")
        o = Owner(connect(ident, engine=eng), make_config())
        o.create_stream()
        fill(o, [3, 4, 5])
        eng.store.close()
        eng2 = Engine(FileKvStore(path))
        c = Client(ident, LocalTransport(eng2))
        assert c.stream_info(o.cfg.uuid)[1] == 3
        enc = c.get_stat_range([o.cfg.uuid], T0, T0 + 3 * DELTA)[0][0][1]
        assert enc.span == (0, 3)
        o.client = c
        o.producer().produce(T0 + 3 * DELTA, 1)

    def test_config_file(self, tmp_path):
        p = tmp_path / "server.conf"
        p.write_text("# comment\nlisten = 0.0.0.0:9000\ndata_dir = /tmp/x\ncache_bytes = 4096\n")
        cfg = load_server_config(p)
        assert cfg.listen == ("0.0.0.0", 9000) and str(cfg.data_dir) == "/tmp/x"
        assert cfg.cache_bytes == 4096
        p.write_text("listen 1\n")
        with pytest.raises(ValueError):
            load_server_config(p)

    def test_config_unknown_key(self, tmp_path):
        p = tmp_path / "server.conf"
        p.write_text("colour = blue\n")
        with pytest.raises(ValueError):
            load_server_config(p)
