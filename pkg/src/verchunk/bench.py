"""Command-line bench: generate datasets, partition them, load engines and
run query workloads.

    verchunk-bench gen --versions 300 --base-records 1000 --out a0.vlog
    verchunk-bench partition a0.vlog --algorithm all --capacity 20000
    verchunk-bench query a0.vlog --engine chunked,delta --q1 20 --q2 20 --q3 20
    verchunk-bench report-merge a.csv b.csv --out all.csv

Every command writes one CSV (``--csv``) and prints the same rows as a
table. Exit codes: 0 ok, 2 usage, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import random
import statistics
import sys
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from . import datagen
from .deltalog import LogFormatError, dump_graph, load_graph
from .model import CompositeKey, DeltaError, GraphError, Record, VersionGraph, iter_contents
from .partition import ALGORITHMS, PartitionConfig, PartitionError
from .pipeline import delta_q1_requests, place, prepare, report_row
from .storage import LatencySimBackend, MemoryBackend, SealedChunk, StorageError, multi_get_chunks, put_chunk
from .store import ENGINE_CLASSES, ConfigError, EngineConfig, StoreError, open_engine

log = logging.getLogger("verchunk.bench")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3
DATA_ERRORS = (LogFormatError, DeltaError, GraphError, PartitionError, StorageError, StoreError,
               ConfigError, OSError)


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ output

def emit(rows: List[Dict[str, object]], path: Optional[str], title: str = "") -> None:
    if not rows:
        print("(no rows)")
        return
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    if path:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    if title:
        print(title)
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for row in cells:
        print("  ".join(x.ljust(w) for x, w in zip(row, widths)))
    if path:
        print(f"wrote {path}")


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.4g}"
    return str(x)


def _csv_path(args, default: str) -> Optional[str]:
    if args.csv == "-":
        return None
    return args.csv or default


# ------------------------------------------------------------------ gen

def _parse_dist(text: str):
    if text == "random":
        return "random", 1.0
    if text.startswith("zipf"):
        _, _, s = text.partition(":")
        try:
            return "zipf", float(s) if s else 1.0
        except ValueError:
            raise UsageError(f"bad zipf exponent in {text!r}") from None
    raise UsageError(f"--dist must be random or zipf[:s], got {text!r}")


def cmd_gen(args) -> int:
    dist, s = _parse_dist(args.dist)
    try:
        cfg = datagen.GenConfig(n_versions=args.versions, base_records=args.base_records,
                                record_size=args.record_size, update_pct=args.update_pct, update_dist=dist,
                                zipf_s=s, branch_factor=args.branch, merge_rate=args.merge_rate, pd=args.pd,
                                depth_bias=args.depth_bias, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    graph = datagen.generate(cfg)
    with open(args.out, "wb") as f:
        dump_graph(graph, f)
    row = {"dataset": os.path.basename(args.out), **datagen.summarize(graph), "update_pct": cfg.update_pct}
    emit([row], _csv_path(args, args.out + ".gen.csv"))
    return EXIT_OK


# ------------------------------------------------------------------ partition

def _read_dataset(path: str) -> VersionGraph:
    with open(path, "rb") as f:
        return load_graph(f)


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_partition(args) -> int:
    algos = list(ALGORITHMS) + ["delta"] if args.algorithm == "all" else args.algorithm.split(",")
    for a in algos:
        if a not in ALGORITHMS and a != "delta":
            raise UsageError(f"unknown algorithm {a!r}; choose from {', '.join(ALGORITHMS)}, delta, all")
    cfg = args.engine_cfg
    graph = _read_dataset(args.dataset)
    rows = []
    for k in _int_list(args.ks):
        prepared = None
        for a in algos:
            if a == "delta":
                if k == 1:
                    rows.append({"algorithm": "delta", "k": 1, "capacity": cfg.capacity,
                                 "total_span": delta_q1_requests(graph, cfg.capacity)})
                continue
            pc = PartitionConfig(capacity=cfg.capacity, slack=cfg.slack, shingles=cfg.shingles, beta=cfg.beta,
                                 algorithm=a, exact_multichild=cfg.exact_multichild, seed=args.seed)
            if prepared is None:
                prepared = prepare(graph, k)
            pl = place(prepared, pc, k)
            r = report_row(pl, pc, k)
            row = dataclasses.asdict(r)
            row.update(row.pop("extra"))
            rows.append(row)
    emit(rows, _csv_path(args, args.dataset + ".partition.csv"))
    return EXIT_OK


# ------------------------------------------------------------------ load / query

@dataclass
class WorkloadSpec:
    q1: int = 10
    q2: int = 10
    q3: int = 10
    point: int = 10
    range_frac: float = 0.1          # key-range width as a fraction of all keys
    seed: int = 0

    def __post_init__(self):
        if min(self.q1, self.q2, self.q3, self.point) < 0:
            raise UsageError("query counts must be non-negative")
        if not 0 < self.range_frac <= 1:
            raise UsageError("range width must be in (0, 1]")

    def queries(self, versions: Sequence[int], keys: Sequence[bytes]):
        """Q1 and Q2 draw the same versions so the two are comparable."""
        rng = random.Random(self.seed)
        versions, keys = sorted(versions), sorted(keys)
        vs = [rng.choice(versions) for _ in range(max(self.q1, self.q2))]
        out = [("Q1", (v,)) for v in vs[:self.q1]]
        width = max(1, int(self.range_frac * len(keys)))
        for v in vs[:self.q2]:
            i = rng.randrange(0, max(1, len(keys) - width + 1))
            out.append(("Q2", (v, keys[i], keys[min(len(keys), i + width) - 1])))
        out += [("Q3", (rng.choice(keys),)) for _ in range(self.q3)]
        out += [("point", (rng.choice(versions), rng.choice(keys))) for _ in range(self.point)]
        return out


def _open_loaded(cfg: EngineConfig, graph: VersionGraph):
    eng = open_engine(cfg)
    if eng.versions:
        if sorted(eng.versions) != sorted(graph.versions):
            raise StoreError("the store at this path holds a different dataset")
    else:
        eng.load(graph)
    return eng


def _clock(backend) -> float:
    return backend.elapsed if isinstance(backend, LatencySimBackend) else 0.0


def cmd_load(args) -> int:
    graph = _read_dataset(args.dataset)
    rows = []
    for name in args.engines:
        cfg = args.engine_cfg.replace(engine=name)
        t0 = time.perf_counter()
        eng = _open_loaded(cfg, graph)
        c = eng.backend.counters
        rows.append({"engine": name, "versions": len(eng.versions), "seconds": time.perf_counter() - t0,
                     "puts": c.puts, "bytes_written": c.bytes_written,
                     "chunks": len(getattr(eng, "chunk_ids", lambda: [])()),
                     "total_span": eng.total_span() if hasattr(eng, "total_span") else ""})
        eng.close()
    emit(rows, _csv_path(args, args.dataset + ".load.csv"))
    return EXIT_OK


def run_workload(eng, spec: WorkloadSpec, keys: Sequence[bytes]) -> List[Dict[str, object]]:
    backend = eng.backend
    per: Dict[str, Dict[str, list]] = {}
    for kind, qargs in spec.queries(eng.versions, keys):
        c0, v0, w0 = backend.counters.snapshot(), _clock(backend), time.perf_counter()
        if kind == "Q1":
            eng.get_version(*qargs)
        elif kind == "Q2":
            eng.get_range(*qargs)
        elif kind == "Q3":
            eng.get_evolution(*qargs)
        else:
            eng.get_record(*qargs)
        wall = time.perf_counter() - w0
        d = backend.counters.minus(c0)
        acc = per.setdefault(kind, {"lat": [], "wall": [], "req": [], "bytes": []})
        acc["lat"].append((_clock(backend) - v0) if isinstance(backend, LatencySimBackend) else wall)
        acc["wall"].append(wall)
        acc["req"].append(d.requests)
        acc["bytes"].append(d.bytes_read)
    rows = []
    for kind in ("Q1", "Q2", "Q3", "point"):
        acc = per.get(kind)
        if not acc:
            continue
        lat = sorted(acc["lat"])
        rows.append({"engine": eng.kind, "query": kind, "count": len(lat),
                     "mean_ms": 1000 * statistics.fmean(lat),
                     "p50_ms": 1000 * lat[len(lat) // 2],
                     "p95_ms": 1000 * lat[min(len(lat) - 1, math.ceil(0.95 * len(lat)) - 1)],
                     "wall_mean_ms": 1000 * statistics.fmean(acc["wall"]),
                     "requests": sum(acc["req"]), "bytes": sum(acc["bytes"]),
                     "total_ms": 1000 * sum(lat)})
    return rows


def cmd_query(args) -> int:
    graph = _read_dataset(args.dataset)
    spec = WorkloadSpec(args.q1, args.q2, args.q3, args.point, args.range_width, args.seed)
    keys = sorted({key for _, c in iter_contents(graph) for key in c})
    rows = []
    for name in args.engines:
        eng = _open_loaded(args.engine_cfg.replace(engine=name), graph)
        rows += run_workload(eng, spec, keys)
        eng.close()
    emit(rows, _csv_path(args, args.dataset + ".query.csv"))
    return EXIT_OK


def cmd_report_merge(args) -> int:
    rows: List[Dict[str, object]] = []
    for p in args.reports:
        with open(p, newline="") as f:
            for r in csv.DictReader(f):
                rows.append({"report": os.path.basename(p), **r})
    emit(rows, args.out)
    return EXIT_OK


# ------------------------------------------------------------------ chunk-size sweep

def chunk_size_sweep(sizes: Sequence[int] = (1, 10, 100, 1000, 10000), version_records: int = 100_000,
                     unique_records: int = 200_000, record_size: int = 100, per_request: float = 0.0005,
                     per_byte: float = 2e-9, parallelism: int = 16, seed: int = 0) -> List[Dict[str, object]]:
    """Reconstruct one version whose records are spread at random over
    chunks of a fixed record count, for each chunk size; time is the
    simulated backend's makespan."""
    rng = random.Random(seed)
    payload = bytes(record_size)
    recs = [Record(CompositeKey(b"r%08d" % i, 0), payload) for i in range(unique_records)]
    member = set(rng.sample(range(unique_records), version_records))
    rows = []
    for size in sizes:
        order = list(range(unique_records))
        rng.shuffle(order)
        backend = LatencySimBackend(MemoryBackend(), per_request, per_byte)
        ids = []
        for cid, start in enumerate(range(0, unique_records, size)):
            idx = order[start:start + size]
            mine = [recs[i].ck for i in idx if i in member]
            put_chunk(backend, SealedChunk(cid, [recs[i] for i in idx], {1: mine} if mine else {}))
            if mine:
                ids.append(cid)
        c0, t0, w0 = backend.counters.snapshot(), backend.elapsed, time.perf_counter()
        got = sum(len(ch.records_for(1)) for ch in multi_get_chunks(backend, ids, parallelism))
        d = backend.counters.minus(c0)
        assert got == version_records
        rows.append({"chunk_records": size, "chunks_fetched": len(ids), "requests": d.requests,
                     "bytes": d.bytes_read, "seconds": backend.elapsed - t0,
                     "wall_seconds": time.perf_counter() - w0})
    return rows


# ------------------------------------------------------------------ argparse

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="engine config file (key=value lines)")
    common.add_argument("--backend", choices=["memory", "file", "latency"])
    common.add_argument("--csv", help="report path ('-' for none)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="verchunk-bench", description=__doc__.split("\n\n")[0].replace("\n", " "), parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a dataset as a delta log")
    g.add_argument("--versions", type=int, default=100)
    g.add_argument("--base-records", type=int, default=1000)
    g.add_argument("--record-size", type=int, default=100)
    g.add_argument("--update-pct", type=float, default=0.05)
    g.add_argument("--dist", default="random", help="random or zipf[:s]")
    g.add_argument("--pd", type=float, default=0.01, help="max fraction of a payload changed per update")
    g.add_argument("--branch", type=float, default=1.0, help="expected children per version")
    g.add_argument("--merge-rate", type=float, default=0.0)
    g.add_argument("--depth-bias", type=float, default=0.8)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    def engine_flags(sp):
        sp.add_argument("--capacity", type=int)
        sp.add_argument("--slack", type=float)
        sp.add_argument("--beta", type=int)
        sp.add_argument("--shingles", type=int)
        sp.add_argument("--parallelism", type=int)
        sp.add_argument("--path", help="store file for the file backend")
        sp.add_argument("--realtime", action="store_true", help="sleep simulated latency")

    pa = sub.add_parser("partition", parents=[common], help="partition a dataset and report spans")
    pa.add_argument("dataset")
    pa.add_argument("--algorithm", default="all", help=f"comma list of {', '.join(ALGORITHMS)}, delta, or all")
    pa.add_argument("--k", dest="ks", default="1", help="comma list of sub-chunk sizes")
    engine_flags(pa)
    pa.set_defaults(fn=cmd_partition)

    for name, fn, helptext in (("load", cmd_load, "load a dataset into engines"),
                               ("query", cmd_query, "run a query workload")):
        q = sub.add_parser(name, parents=[common], help=helptext)
        q.add_argument("dataset")
        q.add_argument("--engine", default="chunked", help=f"comma list of {', '.join(ENGINE_CLASSES)} or all")
        q.add_argument("--algorithm", choices=ALGORITHMS)
        q.add_argument("--k", type=int)
        q.add_argument("--batch-size", type=int)
        engine_flags(q)
        if name == "query":
            q.add_argument("--q1", type=int, default=10)
            q.add_argument("--q2", type=int, default=10)
            q.add_argument("--q3", type=int, default=10)
            q.add_argument("--point", type=int, default=10)
            q.add_argument("--range-width", type=float, default=0.1, help="fraction of the key space")
        q.set_defaults(fn=fn)

    r = sub.add_parser("report-merge", parents=[common], help="concatenate CSV reports")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report_merge)
    return p


def _engine_cfg(args) -> EngineConfig:
    over = {"backend": args.backend, "seed": args.seed}
    for name in ("capacity", "slack", "beta", "shingles", "parallelism", "path", "algorithm", "k", "batch_size"):
        over[name] = getattr(args, name, None)
    if getattr(args, "realtime", False):
        over["realtime"] = True
    if args.config:
        return EngineConfig.load(args.config, **over)
    if over["backend"] is None:
        over["backend"] = "latency"
    return EngineConfig(**{k: v for k, v in over.items() if v is not None})


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command != "gen" and args.command != "report-merge":
            args.engine_cfg = _engine_cfg(args)
        if hasattr(args, "engine"):
            names = list(ENGINE_CLASSES) if args.engine == "all" else args.engine.split(",")
            for n in names:
                if n not in ENGINE_CLASSES:
                    raise UsageError(f"unknown engine {n!r}")
            args.engines = names
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
