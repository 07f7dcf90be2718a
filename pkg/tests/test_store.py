import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from verchunk.datagen import GenConfig, generate
from verchunk.fixtures import K, PARTITION_VERSION_AWARE, ck, five_version_tree, merge_graph, rec
from verchunk.model import CompositeKey, Delta, Record
from verchunk.storage import FaultyBackend, MemoryBackend, get_chunk
from verchunk.store import (ChunkedStore, ConfigError, EngineConfig, InconsistentDelta, StoreError,
                            UnknownVersion, open_engine)

from helpers import ENGINES, check_against_oracle, loaded_engines, oracle, random_commits
from strategies import graphs

SMALL = dict(capacity=2, slack=0)


@pytest.fixture(params=ENGINES)
def fig(request):
    e = open_engine(EngineConfig(engine=request.param, **SMALL), MemoryBackend())
    e.load(five_version_tree())
    return e


def test_point_queries_on_five_version_tree(fig):
    assert fig.get_record(3, K(3)) == rec(3, 1)
    assert fig.get_record(2, K(2)) is None
    assert fig.get_version(0) == {rec(i, 0) for i in range(4)}


def test_evolution_of_k3(fig):
    ev = fig.get_evolution(K(3))
    assert [r.origin for r, _ in ev] == [0, 1, 2, 4]
    assert ev[1] == (rec(3, 1), frozenset({1, 3}))
    assert fig.get_evolution(K(5)) == [(rec(5, 2), frozenset({2}))]
    assert fig.get_evolution(b"never") == []


def test_range_on_five_version_tree(fig):
    assert fig.get_range(3, K(3), K(5)) == {rec(3, 1), rec(4, 1)}
    assert fig.get_range(1, b"", b"\xff") == fig.get_version(1)
    with pytest.raises(StoreError):
        fig.get_range(1, K(5), K(3))


def test_unknown_version(fig):
    with pytest.raises(UnknownVersion):
        fig.get_version(99)
    with pytest.raises(UnknownVersion):
        fig.commit(99, upserts={b"a": b"b"})


def test_version_aware_layout_fetches_three_chunks_for_v1():
    b = MemoryBackend()
    e = open_engine(EngineConfig(**SMALL), b)
    e.load(five_version_tree())
    name = {}
    for cid in e.chunk_ids():
        held = {i.ck for i in get_chunk(b, cid).items}
        name[cid] = next(n for n, g in enumerate(PARTITION_VERSION_AWARE) if set(g) == held)
    before = b.counters.snapshot()
    got = e.get_version(1)
    d = b.counters.minus(before)
    assert {name[c] for c in e.index.version_to_chunks[1]} == {0, 1, 2}
    assert d.requests == 3 == e.span(1)
    assert got == {rec(0, 0), rec(1, 0), rec(2, 0), rec(3, 1), rec(4, 1)}


def test_unknown_key_point_query_fetches_nothing():
    b = MemoryBackend()
    e = open_engine(EngineConfig(**SMALL), b)
    e.load(five_version_tree())
    before = b.counters.snapshot()
    assert e.get_record(1, b"never") is None
    assert b.counters.minus(before).requests == 0


def test_merge_graph_all_engines():
    g = merge_graph()
    engines = loaded_engines(g, **SMALL)
    check_against_oracle(engines, oracle(g), random.Random(0))


@settings(max_examples=25)
@given(graphs(max_versions=15), st.integers(0, 2**16), st.sampled_from([1, 3]), st.integers(1, 6))
def test_engines_agree_with_oracle(g, seed, k, batch):
    rng = random.Random(seed)
    engines = loaded_engines(g, capacity=400, k=k, batch_size=batch)
    contents = random_commits(engines, oracle(g), 8, rng)
    check_against_oracle(engines, contents, rng, ranges=2, points=4)
    ch = engines["chunked"]
    ch.compact()
    check_against_oracle({"chunked": ch}, contents, rng, ranges=2, points=4)
    _check_projections(ch, contents)


def _check_projections(e: ChunkedStore, contents):
    """Every record of v lives in a chunk listed under v and under its key."""
    for cid in e.chunk_ids():
        ch = get_chunk(e.backend, cid)
        for v, cks in ch.chunk_map.items():
            assert cid in e.index.version_to_chunks[v]
            for c in cks:
                assert cid in e.index.key_to_chunks[c.key]
    for v in contents:
        assert len(e.index.version_to_chunks[v]) == e.span(v)


def test_fetched_chunk_bounds():
    g = generate(GenConfig(n_versions=40, base_records=200, record_size=20, branch_factor=1.5, seed=2))
    b = MemoryBackend()
    e = open_engine(EngineConfig(capacity=400), b)
    e.load(g)
    rng = random.Random(1)
    keys = sorted({r.key for r in e.get_version(e.root)})
    for v in rng.sample(e.versions, 10):
        s = b.counters.snapshot()
        e.get_version(v)
        assert b.counters.minus(s).requests == e.span(v)
        for key in rng.sample(keys, 5):
            s = b.counters.snapshot()
            e.get_record(v, key)
            bound = min(len(e.index.version_to_chunks[v]), len(e.index.key_to_chunks.get(key, ())))
            assert b.counters.minus(s).requests <= bound
        lo, hi = sorted(rng.sample(keys, 2))
        s = b.counters.snapshot()
        e.get_range(v, lo, hi)
        assert b.counters.minus(s).requests <= e.span(v)


# ------------------------------------------------------------ online ingest

def _fresh(batch=3, capacity=8, **kw):
    b = MemoryBackend()
    e = open_engine(EngineConfig(capacity=capacity, batch_size=batch, **kw), b)
    e.load(five_version_tree())
    return b, e


def test_empty_commit_gets_distinct_id():
    _, e = _fresh()
    v = e.commit(4)
    assert v == 5 and e.get_version(5) == e.get_version(4)
    assert e.commit(4) == 6
    e.compact()
    assert e.get_version(6) == e.get_version(4)
    assert e.index.version_to_chunks[6] == e.index.version_to_chunks[4]


def test_first_commit_readable_before_compaction():
    _, e = _fresh(batch=10)
    v = e.commit(0, upserts={K(0): b"new"}, deletes=[K(1)])
    assert v in e.pending
    assert e.get_version(v) == {Record(CompositeKey(K(0), v), b"new"), rec(2, 0), rec(3, 0)}
    assert e.get_record(v, K(1)) is None
    assert [r.origin for r, _ in e.get_evolution(K(0))] == [0, v]


def test_two_batches_compact_twice():
    _, e = _fresh(batch=4)
    for i in range(8):
        e.commit(e.versions[-1], upserts={K(i % 6): b"p%d" % i})
    assert e.compactions == 2 and e.pending == []
    assert not e.backend.keys(b"D:")


def test_small_batch_writes_one_chunk_map():
    b, e = _fresh(batch=1, capacity=100)
    assert e.span(3) == 1
    s = b.counters.snapshot()
    e.commit(3, upserts={K(3): b"z"})
    d = b.counters.minus(s)
    st = e.last_compaction
    assert (st.chunk_map_writes, st.items_appended, st.chunks_created) == (1, 1, 0)
    assert d.puts_by_ns == {b"D:": 1, b"C:": 1, b"I:": 3}


def test_empty_batch_creates_no_chunks():
    b, e = _fresh(batch=1)
    before = set(e.chunk_ids())
    v = e.commit(2)
    st = e.last_compaction
    assert st.chunks_created == 0 and st.items_appended == 0
    assert set(e.chunk_ids()) == before
    assert e.index.version_to_chunks[v] == e.index.version_to_chunks[2]


def test_inconsistent_deltas_rejected():
    _, e = _fresh()
    with pytest.raises(InconsistentDelta):
        e.commit(2, deletes=[K(2)])                       # K2 was deleted in V2
    with pytest.raises(InconsistentDelta):
        e.commit(0, Delta(0, 9, adds=(rec(0, 9),)))         # add of an existing key
    with pytest.raises(InconsistentDelta):
        e.commit(0, Delta(0, 9, deletes=(ck(0, 7),)))
    with pytest.raises(InconsistentDelta):
        e.commit(0, Delta(0, 9), upserts={K(1): b"x"})
    ok = e.commit(0, Delta(0, 9, updates=(rec(0, 9, b"q"),)))
    assert e.get_record(ok, K(0)) == Record(CompositeKey(K(0), ok), b"q")


def test_load_twice_rejected():
    _, e = _fresh()
    with pytest.raises(StoreError):
        e.load(five_version_tree())


def _scripted(e, n=9):
    rng = random.Random(7)
    for i in range(n):
        parent = rng.choice(e.versions)
        keys = sorted(r.key for r in e.get_version(parent))
        ups = {rng.choice(keys): b"u%d" % i, b"X%02d" % i: b"x%d" % i}
        e.commit(parent, upserts=ups, deletes=[k for k in keys[:1] if k not in ups])


def _answers(e):
    out = {v: e.get_version(v) for v in e.versions}
    keys = sorted({r.key for rs in out.values() for r in rs})
    return out, {k: e.get_evolution(k) for k in keys}


@pytest.mark.parametrize("k", [1, 3])
def test_crash_at_every_write_of_a_compaction(k):
    cfg = EngineConfig(capacity=8 if k == 1 else 200, batch_size=100, k=k)
    ref = open_engine(cfg, MemoryBackend())
    ref.load(merge_graph())
    _scripted(ref)
    s = ref.backend.counters.snapshot()
    ref.compact()
    writes = ref.backend.counters.minus(s)
    n_writes = writes.puts + writes.deletes
    want = _answers(ref)
    assert n_writes > 5
    for i in range(n_writes):
        inner = MemoryBackend()
        fb = FaultyBackend(inner)
        e = open_engine(cfg, fb)
        e.load(merge_graph())
        _scripted(e)
        fb.fail_after = i
        with pytest.raises(FaultyBackend.Crash):
            e.compact()
        again = open_engine(cfg, inner)
        again.compact()
        assert _answers(again) == want, i
        assert not inner.keys(b"D:")


def test_reopen_file_backend(tmp_path):
    path = str(tmp_path / "store.log")
    for kind in ENGINES:
        cfg = EngineConfig(engine=kind, capacity=8, batch_size=4, backend="file", path=f"{path}.{kind}")
        e = open_engine(cfg)
        e.load(merge_graph())
        _scripted(e, 6)
        want = _answers(e)
        e.close()
        e = open_engine(cfg)
        assert _answers(e) == want, kind
        e.close()


def test_reads_during_compaction_see_a_consistent_state():
    g = generate(GenConfig(n_versions=30, base_records=200, record_size=16, seed=4))
    e = open_engine(EngineConfig(capacity=300, batch_size=5), MemoryBackend())
    e.load(g)
    contents = oracle(g)
    lock = threading.Lock()
    stop = threading.Event()
    errors = []

    def reader(seed):
        rng = random.Random(seed)
        while not stop.is_set():
            with lock:
                vs = sorted(contents)
            v = rng.choice(vs)
            try:
                assert e.get_version(v) == set(contents[v].values())
                key = rng.choice(sorted(contents[v]))
                assert e.get_record(v, key) == contents[v][key]
            except Exception as ex:                       # pragma: no cover - reported below
                errors.append(ex)
                return

    threads = [threading.Thread(target=reader, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    rng = random.Random(9)
    for i in range(40):
        with lock:
            parent = rng.choice(sorted(contents))
        cur = contents[parent]
        key = rng.choice(sorted(cur))
        v = e.commit(parent, upserts={key: b"w%d" % i})
        nxt = dict(cur)
        nxt[key] = Record(CompositeKey(key, v), b"w%d" % i)
        with lock:
            contents[v] = nxt
    stop.set()
    for t in threads:
        t.join()
    assert not errors, errors[0]
    assert e.compactions == 8


# ------------------------------------------------------------ baselines

def test_delta_baseline_requests_grow_with_chain_length():
    g = generate(GenConfig(n_versions=100, base_records=50, record_size=10, seed=1))
    b = MemoryBackend()
    e = open_engine(EngineConfig(engine="delta", capacity=100_000), b)
    e.load(g)
    counts = []
    for v in (9, 49, 99):
        s = b.counters.snapshot()
        e.get_version(v)
        counts.append(b.counters.minus(s).requests)
    assert counts == [10, 50, 100]


def test_subchunk_baseline_evolution_is_one_request():
    g = generate(GenConfig(n_versions=60, base_records=50, record_size=10, seed=1))
    b = MemoryBackend()
    e = open_engine(EngineConfig(engine="subchunk"), b)
    e.load(g)
    for key in sorted(r.key for r in e.get_version(e.root))[:10]:
        s = b.counters.snapshot()
        e.get_evolution(key)
        assert b.counters.minus(s).requests == 1


# ------------------------------------------------------------ config

def test_config_parse_and_dump_roundtrip():
    cfg = EngineConfig.parse("""
        # engine settings
        engine = chunked
        algorithm=shingle
        capacity=5000
        slack=0.1
        k=5
        beta=
        exact_multichild=yes
        batch_size=10
    """, parallelism=4)
    assert (cfg.algorithm, cfg.capacity, cfg.k, cfg.beta, cfg.parallelism) == ("shingle", 5000, 5, None, 4)
    assert cfg.exact_multichild is True
    assert EngineConfig.parse(cfg.dumps()) == cfg


@pytest.mark.parametrize("text", ["engine=rocks", "capacity=big", "nonsense", "colour=blue", "k=0",
                                  "backend=file", "exact_multichild=maybe"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        EngineConfig.parse(text)
