import math
import os
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from verchunk.fixtures import PARTITION_VERSION_AWARE, ck, five_version_tree, rec
from verchunk.model import materialize_all
from verchunk.storage import (CorruptFrame, FaultyBackend, FileBackend, LatencySimBackend, MemoryBackend,
                              MissingKeys, SealedChunk, StorageError, chunk_key, delta_key, deserialize_chunk,
                              get_chunk, index_key, multi_get_chunks, put_chunk, serialize_chunk)

from helpers import build_chunk


@pytest.fixture(params=["memory", "file"])
def backend(request, tmp_path):
    b = MemoryBackend() if request.param == "memory" else FileBackend(str(tmp_path / "kv.log"))
    yield b
    b.close()


def test_basic_ops_and_counters(backend):
    backend.put(b"C:a", b"1")
    backend.put(b"I:a", b"22")
    backend.put(b"C:a", b"333")
    assert backend.get(b"C:a") == b"333" and backend.get(b"C:zz") is None
    backend.delete(b"I:a")
    backend.delete(b"I:a")
    assert backend.keys(b"I:") == [] and backend.keys(b"C:") == [b"C:a"]
    c = backend.counters
    assert (c.puts, c.gets, c.deletes) == (3, 2, 2)
    assert c.bytes_written == 6 and c.bytes_read == 3
    assert c.puts_by_ns == {b"C:": 2, b"I:": 1}
    assert dict(backend.scan_prefix(b"C:")) == {b"C:a": b"333"}


def test_namespaces_do_not_collide():
    assert len({chunk_key(1), delta_key(1), index_key("1")}) == 3
    assert chunk_key(1).startswith(b"C:") and delta_key(1).startswith(b"D:") and index_key("x") == b"I:x"
    assert chunk_key(2) > chunk_key(1)


ops_st = st.lists(st.tuples(st.sampled_from(["put", "del"]), st.binary(min_size=1, max_size=3),
                            st.binary(max_size=20)), max_size=60)


@settings(max_examples=40)
@given(ops_st)
def test_file_backend_matches_memory_and_survives_reopen(tmp_path_factory, ops):
    path = str(tmp_path_factory.mktemp("kv") / "log")
    mem, fb = MemoryBackend(), FileBackend(path)
    for op, k, v in ops:
        for b in (mem, fb):
            b.put(k, v) if op == "put" else b.delete(k)
    snap = {k: mem.get(k) for k in mem.keys()}
    assert {k: fb.get(k) for k in fb.keys()} == snap
    fb.close()
    again = FileBackend(path)
    assert {k: again.get(k) for k in again.keys()} == snap
    again.close()


def test_torn_tail_is_dropped(tmp_path):
    path = str(tmp_path / "kv.log")
    fb = FileBackend(path)
    fb.put(b"a", b"first")
    fb.put(b"b", b"second")
    fb.close()
    size = os.path.getsize(path)
    with open(path, "r+b") as f:
        f.truncate(size - 3)
    fb = FileBackend(path)
    assert fb.get(b"a") == b"first" and fb.get(b"b") is None
    fb.put(b"c", b"third")
    fb.close()
    fb = FileBackend(path)
    assert sorted(fb.keys()) == [b"a", b"c"]
    fb.close()


def test_multi_get_counts_one_request_per_key(backend):
    for i in range(5):
        backend.put(b"k%d" % i, b"x" * i)
    before = backend.counters.snapshot()
    got = backend.multi_get([b"k1", b"k3", b"nope"], parallelism=4)
    d = backend.counters.minus(before)
    assert got == {b"k1": b"x", b"k3": b"xxx", b"nope": None}
    assert (d.requests, d.gets, d.bytes_read) == (3, 3, 4)


def test_faulty_backend_crashes_after_n_writes():
    b = FaultyBackend(MemoryBackend(), fail_after=2)
    b.put(b"a", b"1")
    b.delete(b"a")
    with pytest.raises(FaultyBackend.Crash):
        b.put(b"b", b"2")
    assert b.get(b"b") is None


def test_latency_virtual_makespan():
    b = LatencySimBackend(MemoryBackend(), per_request=0.001)
    for i in range(100):
        b.put(b"k%03d" % i, b"v")
    b.elapsed = 0.0
    b.multi_get([b"k%03d" % i for i in range(100)], parallelism=16)
    assert b.elapsed == pytest.approx(math.ceil(100 / 16) * 0.001)
    b.elapsed = 0.0
    b.multi_get([b"k%03d" % i for i in range(10)], parallelism=1)
    assert b.elapsed == pytest.approx(0.010)


def test_latency_realtime_parallel_fetch():
    b = LatencySimBackend(MemoryBackend(), per_request=0.0005, realtime=True)
    keys = [b"k%03d" % i for i in range(100)]
    for k in keys:
        b.inner.put(k, b"v")
    b.multi_get(keys[:16], parallelism=16)                   # warm the pool
    t0 = time.perf_counter()
    got = b.multi_get(keys, parallelism=16)
    wall = time.perf_counter() - t0
    expected = math.ceil(100 / 16) * 0.0005
    assert len(got) == 100
    assert wall <= 3 * expected + 0.01
    b.close()


# ------------------------------------------------------------- chunk frames

def example_c2():
    """Chunk C2 of the version-aware partitioning of the five-version tree."""
    g = five_version_tree()
    items = [rec(3, 1), rec(4, 1)]
    held = {r.ck for r in items}
    cmap = {}
    for v, content in materialize_all(g).items():
        mine = [r.ck for r in content.values() if r.ck in held]
        if mine:
            cmap[v] = mine
    return SealedChunk(2, items, cmap)


def test_example_chunk_map_and_roundtrip():
    c = example_c2()
    assert c.chunk_map == {1: [ck(3, 1), ck(4, 1)], 3: [ck(3, 1), ck(4, 1)], 4: [ck(4, 1)]}
    assert list(PARTITION_VERSION_AWARE[2]) == [ck(3, 1), ck(4, 1)]
    b = MemoryBackend()
    put_chunk(b, c)
    back = get_chunk(b, 2)
    assert back.items == c.items and back.chunk_map == c.chunk_map
    assert back.records_for(4) == [rec(4, 1)] and back.records_for(0) == []


def test_chunk_with_empty_map_roundtrips():
    c = SealedChunk(7, [rec(1, 1)], {})
    assert deserialize_chunk(serialize_chunk(c)) == c


def test_chunk_map_must_reference_held_records():
    with pytest.raises(StorageError):
        SealedChunk(0, [rec(1, 1)], {1: [ck(2, 2)]})


chunk_st = st.builds(
    lambda recs, subs, seed: (recs, subs, seed),
    st.lists(st.tuples(st.binary(min_size=1, max_size=6), st.integers(0, 2**40), st.binary(max_size=40)),
             max_size=8, unique_by=lambda t: (t[0], t[1])),
    st.lists(st.tuples(st.binary(min_size=1, max_size=6), st.sets(st.integers(0, 10**6), min_size=1, max_size=5),
                       st.binary(max_size=30)), max_size=4, unique_by=lambda t: t[0]),
    st.randoms(use_true_random=False),
)


@given(chunk_st, st.integers(0, 2**63))
def test_chunk_frame_roundtrip(spec, cid):
    recs, subs, rnd = spec
    c = build_chunk(recs, subs, rnd, cid)
    back = deserialize_chunk(serialize_chunk(c))
    assert back.id == c.id and back.chunk_map == c.chunk_map
    assert list(back.all_records()) == list(c.all_records())
    for v in c.chunk_map:
        assert back.records_for(v) == c.records_for(v)


def test_corrupt_chunk_frames_are_rejected():
    data = serialize_chunk(example_c2())
    for pos in (0, 4, 20, len(data) - 1):
        bad = bytearray(data)
        bad[pos] ^= 1
        with pytest.raises(CorruptFrame):
            deserialize_chunk(bytes(bad))
    with pytest.raises(CorruptFrame):
        deserialize_chunk(data[:10])


def test_multi_get_chunks_edge_cases():
    b = MemoryBackend()
    for i in range(3):
        put_chunk(b, SealedChunk(i, [rec(i, 0)], {0: [ck(i, 0)]}))
    before = b.counters.snapshot()
    assert multi_get_chunks(b, []) == []
    assert b.counters.minus(before).requests == 0
    got = multi_get_chunks(b, [2, 0])
    assert [c.id for c in got] == [2, 0]
    assert b.counters.minus(before).requests == 2
    with pytest.raises(MissingKeys) as e:
        multi_get_chunks(b, [0, 5, 9])
    assert e.value.missing == [5, 9]
    with pytest.raises(StorageError):
        multi_get_chunks(b, [1, 1])
    with pytest.raises(MissingKeys):
        get_chunk(b, 42)
