import csv
import hashlib

import pytest

from verchunk.bench import UsageError, WorkloadSpec, chunk_size_sweep, main
from verchunk.datagen import summarize
from verchunk.deltalog import load_graph


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def sha(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def test_gen_is_reproducible(tmp_path):
    a, b, c = (tmp_path / n for n in ("a.log", "b.log", "c.log"))
    for out, seed in ((a, 3), (b, 3), (c, 4)):
        assert run("gen", "--versions", 40, "--base-records", 50, "--branch", 1.5, "--seed", seed,
                   "--out", out) == 0
    assert sha(a) == sha(b) != sha(c)
    summary = rows(f"{a}.gen.csv")[0]
    assert summary["versions"] == "40" and summary["dataset"] == "a.log"


def test_gen_chain_summary(tmp_path, capsys):
    out = tmp_path / "chain.log"
    assert run("gen", "--versions", 300, "--base-records", 1000, "--update-pct", 0.5, "--dist", "random",
               "--record-size", 20, "--out", out, "--csv", "-") == 0
    text = capsys.readouterr().out
    assert "avg_depth" in text
    with open(out, "rb") as f:
        g = load_graph(f)
    s = summarize(g)
    assert s["avg_depth"] == 300 and s["versions"] == 300


def test_gen_single_version(tmp_path):
    out = tmp_path / "one.log"
    assert run("gen", "--versions", 1, "--base-records", 10, "--out", out) == 0
    with open(out, "rb") as f:
        g = load_graph(f)
    assert len(g) == 1 and len(g.root_records) == 10


@pytest.mark.parametrize("argv", [
    ["gen", "--versions", "0", "--out", "x"],
    ["gen", "--dist", "pareto", "--out", "x"],
    ["gen"],
    ["frobnicate"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_data_errors(tmp_path):
    bad = tmp_path / "bad.log"
    bad.write_bytes(b"not a delta log")
    assert run("partition", bad, "--csv", "-") == 3
    assert run("partition", tmp_path / "missing.log", "--csv", "-") == 3


@pytest.fixture(scope="module")
def branched(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench") / "branched.log"
    assert run("gen", "--versions", 120, "--base-records", 1000, "--branch", 2, "--depth-bias", 0.5,
               "--out", out, "--csv", "-") == 0
    return out


def test_partition_reports_every_algorithm(branched, tmp_path):
    report = tmp_path / "p.csv"
    assert run("partition", branched, "--capacity", 2000, "--csv", report) == 0
    got = {r["algorithm"]: int(r["total_span"]) for r in rows(report)}
    assert set(got) == {"bottomUp", "shingle", "dfs", "bfs", "delta"}
    assert got["bottomUp"] == min(got.values())
    assert run("partition", branched, "--algorithm", "random", "--csv", "-") == 2


def test_partition_chain_dfs_equals_bfs(tmp_path):
    out = tmp_path / "chain.log"
    run("gen", "--versions", 60, "--base-records", 200, "--out", out, "--csv", "-")
    report = tmp_path / "p.csv"
    assert run("partition", out, "--algorithm", "dfs,bfs", "--capacity", 2000, "--csv", report) == 0
    a, b = rows(report)
    assert a["total_span"] == b["total_span"] and a["chunks"] == b["chunks"]


def test_partition_k_list(branched, tmp_path):
    report = tmp_path / "k.csv"
    assert run("partition", branched, "--algorithm", "bottomUp", "--k", "1,4", "--capacity", 4000,
               "--csv", report) == 0
    got = rows(report)
    assert [r["k"] for r in got] == ["1", "4"]
    assert float(got[1]["compression_ratio"]) > float(got[0]["compression_ratio"]) == 1.0


@pytest.fixture(scope="module")
def query_report(branched, tmp_path_factory):
    report = tmp_path_factory.mktemp("q") / "q.csv"
    assert run("query", branched, "--engine", "all", "--capacity", 20000, "--q1", 5, "--q2", 5, "--q3", 10,
               "--point", 10, "--csv", report) == 0
    return {(r["engine"], r["query"]): r for r in rows(report)}


def _total(r):
    return float(r["total_ms"])


def test_query_directions(query_report):
    q = query_report
    assert _total(q["chunked", "Q2"]) <= _total(q["chunked", "Q1"])
    assert int(q["delta", "Q2"]["requests"]) >= int(q["delta", "Q1"]["requests"])
    assert _total(q["delta", "Q2"]) >= _total(q["delta", "Q1"])
    assert _total(q["subchunk", "Q3"]) < _total(q["chunked", "Q3"])
    assert _total(q["subchunk", "Q1"]) == max(_total(q[e, "Q1"]) for e in ("chunked", "delta", "subchunk", "single"))


def test_load_and_report_merge(branched, tmp_path):
    load = tmp_path / "load.csv"
    assert run("load", branched, "--engine", "chunked,single", "--capacity", 20000, "--csv", load) == 0
    got = rows(load)
    assert [r["engine"] for r in got] == ["chunked", "single"] and int(got[0]["chunks"]) > 0
    merged = tmp_path / "all.csv"
    assert run("report-merge", load, load, "--out", merged) == 0
    assert len(rows(merged)) == 4
    assert run("load", branched, "--engine", "rocks", "--csv", "-") == 2


def test_file_backend_store_is_reused(branched, tmp_path):
    path = tmp_path / "store.kv"
    argv = ["query", branched, "--backend", "file", "--path", path, "--capacity", 20000, "--csv", "-"]
    assert run(*argv) == 0
    assert run(*argv) == 0
    other = tmp_path / "other.log"
    run("gen", "--versions", 5, "--base-records", 5, "--out", other, "--csv", "-")
    assert run("query", other, "--backend", "file", "--path", path, "--csv", "-") == 3


def test_config_file(branched, tmp_path):
    cfg = tmp_path / "engine.cfg"
    cfg.write_text("algorithm=dfs\ncapacity=3000\nbackend=memory\n")
    report = tmp_path / "load.csv"
    assert run("load", branched, "--config", cfg, "--csv", report) == 0
    cfg.write_text("capacity=lots\n")
    assert run("load", branched, "--config", cfg, "--csv", "-") == 2


def test_workload_is_seeded():
    versions, keys = list(range(50)), [b"k%03d" % i for i in range(100)]
    a = WorkloadSpec(seed=5).queries(versions, keys)
    assert a == WorkloadSpec(seed=5).queries(versions, keys) != WorkloadSpec(seed=6).queries(versions, keys)
    q1 = [x for kind, x in a if kind == "Q1"]
    q2 = [x[0] for kind, x in a if kind == "Q2"]
    assert [v for (v,) in q1] == q2
    with pytest.raises(UsageError):
        WorkloadSpec(q1=-1)


def test_chunk_size_sweep_small():
    got = chunk_size_sweep(sizes=(1, 10, 100), version_records=500, unique_records=1000)
    secs = [r["seconds"] for r in got]
    assert secs[0] > secs[1] > secs[2]
    assert got[0]["requests"] == 500
