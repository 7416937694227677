"""Command line, run in-process against an embedded store."""

import json

import pytest

from heacstore.cli import main, parse_bins, parse_duration


@pytest.fixture
def run(tmp_path, capsys):
    data = tmp_path / "data"

    def _run(who, *argv):
        code = main(["--home", str(tmp_path / who), "--principal", who, "--embedded",
                     "--data-dir", str(data), "--json", *argv])
        out = capsys.readouterr()
        return code, [json.loads(line) for line in out.out.splitlines() if line.strip()], out.err

    return _run


@pytest.fixture
def stream(run, tmp_path):
    csv = tmp_path / "points.csv"
    rows = [(t * 1000, (t * 7) % 50) for t in range(0, 120, 2)]
    csv.write_text("timestamp_ms,value\n" + "".join(f"{t},{v}\n" for t, v in rows))
    code, (doc,), _ = run("alice", "create-stream", "--delta", "10s", "--bins", "0:10:5", "--fanout", "4")
    assert code == 0
    code, (ing,), _ = run("alice", "ingest", "--stream", doc["stream"], "--file", str(csv))
    assert code == 0 and ing["points"] == len(rows) and ing["chunks"] == 12
    return doc["stream"], rows


class TestParsers:
    @pytest.mark.parametrize("text,ms", [("10s", 10_000), ("5m", 300_000), ("250", 250), ("1d", 86_400_000)])
    def test_duration(self, text, ms):
        assert parse_duration(text) == ms

    def test_bins(self):
        assert parse_bins("0:10:3").bin_boundaries == (0, 10, 20, 30)
        assert parse_bins("none").bin_boundaries == ()


class TestCommands:
    def test_query_matches_csv(self, run, stream):
        u, rows = stream
        code, (out,), _ = run("alice", "query", "--stream", u, "--from", "0", "--to", "60s")
        assert code == 0
        vals = [v for t, v in rows if t < 60_000]
        assert out["sum"] == sum(vals) and out["count"] == len(vals)
        code, (out,), _ = run("alice", "query", "--stream", u, "--from", "0", "--to", "60s", "--op", "mean")
        assert out == {"mean": sum(vals) / len(vals)}

    def test_raw(self, run, stream):
        u, rows = stream
        code, pts, _ = run("alice", "raw", "--stream", u, "--from", "3s", "--to", "9s")
        assert [(p["timestamp"], p["value"]) for p in pts] == [r for r in rows if 3000 <= r[0] < 9000]

    def test_grant_with_resolution(self, run, stream, tmp_path):
        u, rows = stream
        key = tmp_path / "bob.json"
        assert run("bob", "identity", "--export", str(key))[0] == 0
        code, (g,), _ = run("alice", "grant", "--stream", u, "--from", "0", "--to", "120s",
                            "--principal-key", str(key), "--res", "60s")
        assert code == 0 and g["stride"] == 6
        code, (out,), _ = run("bob", "query", "--stream", u, "--from", "60s", "--to", "120s")
        assert out["sum"] == sum(v for t, v in rows if t >= 60_000)
        code, _, err = run("bob", "query", "--stream", u, "--from", "0", "--to", "10s")
        assert code == 1 and "UnalignedForResolution" in err
        code, _, err = run("bob", "raw", "--stream", u, "--from", "0", "--to", "10s")
        assert code == 1 and "OutsideGrant" in err

    def test_open_grant_and_revoke(self, run, stream, tmp_path):
        u, _ = stream
        key = tmp_path / "carol.json"
        run("carol", "identity", "--export", str(key))
        code, (g,), _ = run("alice", "grant", "--stream", u, "--from", "0", "--open", "--principal-key", str(key))
        assert code == 0 and g["open"]
        code, (r,), _ = run("alice", "revoke", "--stream", u, "--principal", "carol", "--at", "0")
        assert code == 0 and r["principal"] == "carol" and r["dropped"] == 1

    def test_non_owner_cannot_ingest(self, run, stream, tmp_path):
        u, _ = stream
        csv = tmp_path / "x.csv"
        csv.write_text("1,1\n")
        code, _, err = run("bob", "ingest", "--stream", u, "--file", str(csv))
        assert code == 1 and "root secret" in err

    def test_rollup(self, run, stream):
        u, _ = stream
        code, (out,), _ = run("alice", "rollup", "--stream", u, "--from", "0", "--to", "80s", "--res", "40s")
        assert code == 0 and out["deleted_nodes"] > 0
        code, pts, _ = run("alice", "raw", "--stream", u, "--from", "0", "--to", "10s")
        assert pts == []

    def test_unreachable_server(self, tmp_path, capsys):
        code = main(["--home", str(tmp_path / "h"), "--server", "127.0.0.1:1", "identity"])
        assert code == 1 and "cannot reach" in capsys.readouterr().err
