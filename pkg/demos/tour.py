"""A small versioned dataset end to end: load a root, branch it, query it,
and watch how many chunks each query has to fetch.

    python3 demos/tour.py
"""
from verchunk.model import CompositeKey, Record, VersionGraph
from verchunk.store import EngineConfig, open_engine


def fetched(store, fn, *args):
    before = store.backend.counters.snapshot()
    out = fn(*args)
    return out, store.backend.counters.minus(before).requests


def main():
    root = [Record(CompositeKey(b"user%02d" % i, 0), b"profile-%02d" % i) for i in range(12)]
    store = open_engine(EngineConfig(capacity=64, batch_size=3))
    store.load(VersionGraph(0, root))

    # two branches off the root, one of them extended twice
    a = store.commit(0, upserts={b"user03": b"renamed", b"user12": b"new user"})
    b = store.commit(0, deletes=[b"user00", b"user01"])
    c = store.commit(a, upserts={b"user03": b"renamed again"})
    print(f"versions {store.versions}: {store.compactions} compaction, pending {store.pending}")
    d = store.commit(c, upserts={b"user05": b"moved"})
    print(f"after one more commit: pending {store.pending}, compactions {store.compactions}")

    for v in (0, a, b, c, d):
        recs, n = fetched(store, store.get_version, v)
        note = "pending, replayed from its delta" if v in store.pending else f"span {store.span(v)}"
        print(f"V{v}: {len(recs):2d} records from {n} requests ({note})")

    rec, n = fetched(store, store.get_record, d, b"user03")
    print(f"user03 in V{d}: {rec.payload!r} ({n} requests)")
    hits, n = fetched(store, store.get_range, b, b"user00", b"user04")
    print(f"user00..user04 in V{b}: {sorted(r.key.decode() for r in hits)} ({n} requests)")

    print("evolution of user03:")
    for r, vs in store.get_evolution(b"user03"):
        print(f"  {r.payload!r:18} created in V{r.origin}, live in {sorted(vs)}")


if __name__ == "__main__":
    main()
