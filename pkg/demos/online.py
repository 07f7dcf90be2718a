"""Ingest a generated history one commit at a time and compare the layout
batched compaction produces with an offline load of the same history.

    python3 demos/online.py [--versions 400]
"""
import argparse
import time

from verchunk.datagen import GenConfig, generate
from verchunk.model import VersionGraph
from verchunk.store import EngineConfig, open_engine


def replay(g: VersionGraph, cfg: EngineConfig):
    store = open_engine(cfg)
    store.load(VersionGraph(g.root, g.root_records))
    for v in g.topo_order()[1:]:
        p = g.parents[v][0]
        store.commit(p, g.delta(p, v))
    store.compact()
    return store


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--versions", type=int, default=400)
    ap.add_argument("--capacity", type=int, default=5000)
    args = ap.parse_args()
    g = generate(GenConfig(n_versions=args.versions + 1, base_records=500, record_size=100,
                           branch_factor=1.5, depth_bias=0.8, seed=0))

    t0 = time.perf_counter()
    offline = open_engine(EngineConfig(capacity=args.capacity))
    offline.load(g)
    base = offline.total_span()
    print(f"offline: total span {base}, {len(offline.chunk_ids())} chunks, {time.perf_counter() - t0:.1f} s")

    n = args.versions
    for batch in (n // 16, n // 8, n // 4, n // 2, n):
        t0 = time.perf_counter()
        store = replay(g, EngineConfig(capacity=args.capacity, batch_size=batch))
        print(f"batch {batch:4d}: total span {store.total_span():6d} "
              f"(x{store.total_span() / base:.3f}), {len(store.chunk_ids())} chunks, "
              f"compactions {store.compactions}, {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
