"""Oracle-side helpers shared by the store, bench and acceptance tests."""
import random
from typing import Dict

from verchunk.model import CompositeKey, PrimaryKey, Record, VersionGraph, materialize_all
from verchunk.storage import MemoryBackend, SealedChunk
from verchunk.store import EngineConfig, open_engine
from verchunk.subchunk import SubChunk

ENGINES = ("chunked", "delta", "subchunk", "single")


def oracle(graph: VersionGraph) -> Dict[int, Dict[PrimaryKey, Record]]:
    return {v: dict(c) for v, c in materialize_all(graph).items()}


def oracle_evolution(contents, key) -> Dict[Record, frozenset]:
    ev: Dict[Record, set] = {}
    for v, c in contents.items():
        if key in c:
            ev.setdefault(c[key], set()).add(v)
    return {r: frozenset(vs) for r, vs in ev.items()}


def loaded_engines(graph, kinds=ENGINES, **cfg):
    out = {}
    for kind in kinds:
        e = open_engine(EngineConfig(engine=kind, **cfg), MemoryBackend())
        e.load(graph)
        out[kind] = e
    return out


def random_commits(engines, contents, n, rng: random.Random, payload_size=8):
    """Commit the same random change set to every engine; extends ``contents``."""
    for _ in range(n):
        parent = rng.choice(sorted(contents))
        cur = contents[parent]
        keys = sorted(cur)
        ups = {k: bytes(rng.randrange(256) for _ in range(payload_size))
               for k in rng.sample(keys, min(len(keys), rng.randint(0, 3)))}
        ups.update({b"new%06d" % rng.randrange(10**6): b"n" * payload_size for _ in range(rng.randint(0, 2))})
        dels = [k for k in rng.sample(keys, min(len(keys), rng.randint(0, 2))) if k not in ups]
        vids = {e.commit(parent, upserts=ups, deletes=dels) for e in engines.values()}
        assert len(vids) == 1
        vid = vids.pop()
        nxt = {k: r for k, r in cur.items() if k not in dels}
        for k, p in ups.items():
            nxt[k] = Record(CompositeKey(k, vid), p)
        contents[vid] = nxt
    return contents


def check_against_oracle(engines, contents, rng: random.Random, ranges=5, points=10, versions=None):
    keys = sorted({k for c in contents.values() for k in c} | {b"\x00absent", b"zz-absent"})
    vs = versions if versions is not None else sorted(contents)
    for name, e in engines.items():
        for v in vs:
            want = contents[v]
            assert e.get_version(v) == set(want.values()), (name, v)
            for _ in range(ranges):
                lo, hi = sorted(rng.sample(keys, 2))
                assert e.get_range(v, lo, hi) == {r for k, r in want.items() if lo <= k <= hi}, (name, v, lo, hi)
            for k in rng.sample(keys, min(points, len(keys))):
                assert e.get_record(v, k) == want.get(k), (name, v, k)
    evs = {}
    for name, e in engines.items():
        for k in keys:
            got = e.get_evolution(k)
            assert {r: vs_ for r, vs_ in got} == oracle_evolution(contents, k), (name, k)
            evs.setdefault(k, []).append(got)
    for k, lists in evs.items():
        assert all(x == lists[0] for x in lists), k


def chain_subchunk(key, origins, payload):
    ms = [Record(CompositeKey(key, o), payload + bytes([o % 256])) for o in origins]
    return SubChunk.build(ms, [0] + [i - 1 for i in range(1, len(ms))], ms[0].ck, k=len(ms))


def build_chunk(recs, subs, rnd, cid=0):
    items = [Record(CompositeKey(b"r" + k, o), p) for k, o, p in recs]
    items += [chain_subchunk(b"s" + k, sorted(os_), p) for k, os_, p in subs]
    cks = [c for it in items for c in ([it.ck] if isinstance(it, Record) else [m.ck for m in it.members])]
    cmap = {}
    for v in range(rnd.randint(0, 6)):
        pick = [c for c in cks if rnd.random() < 0.5]
        if pick:
            cmap[v * 7] = pick
    return SealedChunk(cid, items, cmap)
