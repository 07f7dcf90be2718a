"""Synthetic versioned datasets.

The graph grows as a Galton-Watson tree: every version gets
``1 + Poisson(branchFactor - 1)`` children, and the next version to expand is
the deepest pending one with probability ``depth_bias`` (otherwise a random
pending one). A fraction ``merge_rate`` of versions receive a second parent.

Each child touches about ``update_pct`` of its parent's records. Updates
overwrite a contiguous slice of at most ``pd`` of the payload; inserts and
deletes are balanced so that versions stay near ``base_records``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Tuple

import numpy as np

from .model import CompositeKey, Delta, Record, VersionGraph


@dataclass(frozen=True)
class GenConfig:
    n_versions: int = 100
    base_records: int = 1000
    record_size: int = 100
    update_pct: float = 0.05
    update_dist: str = "random"     # "random" or "zipf"
    zipf_s: float = 1.0
    branch_factor: float = 1.0
    merge_rate: float = 0.0
    pd: float = 0.01
    seed: int = 0
    depth_bias: float = 0.8
    insert_frac: float = 0.05       # of touched records, before size balancing
    delete_frac: float = 0.05

    def __post_init__(self):
        if self.n_versions < 1:
            raise ValueError("n_versions must be >= 1")
        if not 0 <= self.update_pct <= 0.5:
            raise ValueError("update_pct must lie in [0, 0.5]")
        if not 0 <= self.pd <= 1:
            raise ValueError("pd must lie in [0, 1]")
        if self.update_dist not in ("random", "zipf"):
            raise ValueError(f"unknown update distribution {self.update_dist!r}")
        if self.branch_factor < 1:
            raise ValueError("branch_factor must be >= 1")
        if not 0 <= self.merge_rate < 1:
            raise ValueError("merge_rate must lie in [0, 1)")

    def scaled(self, **kw) -> "GenConfig":
        return replace(self, **kw)


def key_name(i: int) -> bytes:
    return b"k%08d" % i


def generate_graph(cfg: GenConfig) -> Dict[int, Tuple[int, ...]]:
    """Parent lists for versions 0..n-1 (structure only)."""
    rng = np.random.default_rng([cfg.seed, 1])
    parents: Dict[int, Tuple[int, ...]] = {0: ()}
    depth = {0: 1}
    pending = [0]       # versions whose children are not yet spawned
    next_id = 1
    while next_id < cfg.n_versions:
        if not pending:
            # truncation never leaves us without a frontier, but be safe
            pending.append(max(depth, key=lambda v: (depth[v], v)))
        if rng.random() < cfg.depth_bias:
            i = max(range(len(pending)), key=lambda j: (depth[pending[j]], pending[j]))
        else:
            i = int(rng.integers(len(pending)))
        v = pending.pop(i)
        n_children = 1 + int(rng.poisson(cfg.branch_factor - 1)) if cfg.branch_factor > 1 else 1
        for _ in range(n_children):
            if next_id >= cfg.n_versions:
                break
            c = next_id
            next_id += 1
            ps = (v,)
            if cfg.merge_rate > 0 and c > 1 and rng.random() < cfg.merge_rate:
                other = int(rng.integers(c))
                if other != v:
                    ps = (v, other)
            parents[c] = ps
            depth[c] = depth[v] + 1
            pending.append(c)
    return parents


def _mutate(rng: np.random.Generator, payload: bytes, pd: float) -> bytes:
    n = len(payload)
    span = int(pd * n)
    if span <= 0 or n == 0:
        return payload
    length = int(rng.integers(1, span + 1))
    start = int(rng.integers(0, n - length + 1))
    out = bytearray(payload)
    out[start:start + length] = rng.bytes(length)
    return bytes(out)


def _pick(rng, keys: List[bytes], n: int, cfg: GenConfig) -> List[bytes]:
    if n <= 0 or not keys:
        return []
    n = min(n, len(keys))
    if cfg.update_dist == "random":
        idx = rng.choice(len(keys), size=n, replace=False)
    else:
        # popularity by key rank: the key inserted first is the hottest
        ranks = np.array([int(k[1:]) + 1 for k in keys], dtype=float)
        w = ranks ** -cfg.zipf_s
        idx = rng.choice(len(keys), size=n, replace=False, p=w / w.sum())
    return [keys[i] for i in sorted(idx)]


def generate_deltas(parents: Dict[int, Tuple[int, ...]], cfg: GenConfig) -> VersionGraph:
    rng = np.random.default_rng([cfg.seed, 2])
    size = cfg.record_size
    root_records = tuple(Record(CompositeKey(key_name(i), 0), rng.bytes(size)) for i in range(cfg.base_records))
    graph = VersionGraph(0, root_records)
    contents: Dict[int, Dict[bytes, Record]] = {0: {r.key: r for r in root_records}}
    next_key = cfg.base_records
    for v in sorted(parents):
        if v == 0:
            continue
        ps = parents[v]
        base = contents[ps[0]]
        keys = sorted(base)
        touched = int(round(cfg.update_pct * len(base)))
        n_del = int(round(touched * cfg.delete_frac))
        n_ins = int(round(touched * cfg.insert_frac))
        # steer the size back toward base_records
        drift = len(base) - cfg.base_records
        if drift > 0:
            n_del += min(drift, touched // 2)
        elif drift < 0:
            n_ins += min(-drift, touched // 2)
        n_upd = max(0, touched - n_del - n_ins)
        chosen = _pick(rng, keys, n_upd + n_del, cfg)
        order = rng.permutation(len(chosen))
        dels = sorted(chosen[i] for i in order[:n_del])
        upds = sorted(chosen[i] for i in order[n_del:])
        content = dict(base)
        updates = []
        for k in upds:
            r = Record(CompositeKey(k, v), _mutate(rng, base[k].payload, cfg.pd))
            content[k] = r
            updates.append(r)
        deletes = []
        for k in dels:
            deletes.append(base[k].ck)
            del content[k]
        adds = []
        for _ in range(n_ins):
            r = Record(CompositeKey(key_name(next_key), v), rng.bytes(size))
            next_key += 1
            content[r.key] = r
            adds.append(r)
        if len(ps) > 1:
            # take the other parent's record for a share of keys where it differs
            other = contents[ps[1]]
            for k in sorted(other):
                r = other[k]
                cur = content.get(k)
                if (cur is None or cur.ck != r.ck) and (cur is None or cur.origin != v) and rng.random() < 0.5:
                    content[k] = r
        deltas = [Delta.between(p, v, contents[p], content) for p in ps]
        graph.add_version(v, ps, deltas)
        contents[v] = content
    return graph


def generate(cfg: GenConfig) -> VersionGraph:
    return generate_deltas(generate_graph(cfg), cfg)


def summarize(graph: VersionGraph) -> dict:
    """Dataset summary: versions, average leaf depth, records per version,
    unique records and their bytes, total bytes over all versions."""
    from .model import iter_contents
    depths = graph.depths()
    leaves = graph.leaves()
    unique = {}
    total_records = total_bytes = 0
    for _, content in iter_contents(graph):
        total_records += len(content)
        for r in content.values():
            total_bytes += r.size
            unique[r.ck] = r.size
    n = len(graph)
    return {
        "versions": n,
        "avg_depth": sum(depths[v] for v in leaves) / len(leaves),
        "records_per_version": total_records / n,
        "unique_records": len(unique),
        "unique_bytes": sum(unique.values()),
        "total_bytes": total_bytes,
        "merges": len(graph.merges()),
    }
