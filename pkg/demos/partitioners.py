"""Compare the four partitioners on a generated branched dataset, against
the requests a delta-chain store needs to rebuild every version.

    python3 demos/partitioners.py [--versions 200] [--capacity 2000]
"""
import argparse

from verchunk.datagen import GenConfig, generate, summarize
from verchunk.partition import PartitionConfig, capacity_report
from verchunk.pipeline import delta_q1_requests, place, prepare


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--versions", type=int, default=200)
    ap.add_argument("--capacity", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    g = generate(GenConfig(n_versions=args.versions, base_records=1000, record_size=100,
                           branch_factor=1.5, depth_bias=0.8, seed=args.seed))
    info = summarize(g)
    print(f"{info['versions']} versions, {info['unique_records']} unique records, "
          f"average depth {info['avg_depth']:.1f}")

    prepared = prepare(g)
    print(f"{'algorithm':>9} {'total span':>10} {'chunks':>6} {'max fill':>8} {'seconds':>7}")
    for algo in ("bottomUp", "shingle", "dfs", "bfs"):
        cfg = PartitionConfig(capacity=args.capacity, algorithm=algo)
        pl = place(prepared, cfg)
        rep = capacity_report(pl.partitioning, cfg)
        print(f"{algo:>9} {pl.total_span():>10} {rep['chunks']:>6} {rep['max_ratio']:>8.3f} {pl.seconds:>7.2f}")
    print(f"{'delta':>9} {delta_q1_requests(g, args.capacity):>10}  (requests to rebuild every version)")


if __name__ == "__main__":
    main()
