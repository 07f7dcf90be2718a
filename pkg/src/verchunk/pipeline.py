"""Offline placement pipeline: version graph -> tree -> items -> chunks,
with the span and capacity figures the bench reports."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Union

from .deltalog import encode_keyed
from .model import CompositeKey, Delta, PrimaryKey, Record, VersionGraph, VersionId, dag_to_tree, iter_contents
from .partition import ItemTree, Partitioning, PartitionConfig, capacity_report, partition, version_spans
from .subchunk import SubChunk, TreeView, build_subchunks, construct_subchunks, transform_tree

ItemObj = Union[Record, SubChunk]


def make_items(root: VersionId, parent: Dict[VersionId, Optional[VersionId]],
               children: Dict[VersionId, List[VersionId]],
               contents: Mapping[VersionId, Mapping[PrimaryKey, CompositeKey]],
               records: Mapping[CompositeKey, Record], k: int):
    """Items to partition for a version tree: records when k == 1, otherwise
    sub-chunks keyed by their representative (a group of one stays a plain
    record). Returns the item tree, a map record -> item id, and item id ->
    stored object."""
    if k <= 1:
        cont = {v: set(c.values()) for v, c in contents.items()}
        objs: Dict[CompositeKey, ItemObj] = {}
        for cks in cont.values():
            for c in cks:
                objs[c] = records[c]
        it = ItemTree(root, parent, children, cont, {c: r.size for c, r in objs.items()})
        return it, {c: c for c in objs}, objs
    view = TreeView(root, children, {v: dict(c) for v, c in contents.items()}, parent)
    sk = construct_subchunks(view, k)
    tt = transform_tree(view, sk)
    multi = [i for i, s in enumerate(sk) if len(s) > 1]
    subs = build_subchunks([sk[i] for i in multi], records, {j: tt.rep_of[i] for j, i in enumerate(multi)}, k)
    objs = {tt.rep_of[i]: records[s.members[0]] for i, s in enumerate(sk) if len(s) == 1}
    objs.update((tt.rep_of[i], sc) for i, sc in zip(multi, subs))
    it = tt.item_tree({rep: s.size for rep, s in objs.items()})
    return it, tt.item_of(), objs


@dataclass
class Placement:
    tree: VersionGraph
    contents: Dict[VersionId, Dict[PrimaryKey, CompositeKey]]
    records: Dict[CompositeKey, Record]
    item_tree: ItemTree
    item_of: Dict[CompositeKey, CompositeKey]
    objects: Dict[CompositeKey, ItemObj]
    partitioning: Optional[Partitioning] = None
    seconds: float = 0.0

    def spans(self) -> Dict[VersionId, int]:
        cont = {v: c.values() for v, c in self.contents.items()}
        return version_spans(self.partitioning, cont, self.item_of)

    def total_span(self) -> int:
        return sum(self.spans().values())

    def compression_ratio(self) -> float:
        raw = sum(o.raw_size if isinstance(o, SubChunk) else o.size for o in self.objects.values())
        stored = sum(o.size for o in self.objects.values())
        return raw / stored if stored else 1.0


def prepare(graph: VersionGraph, k: int = 1) -> Placement:
    tree = dag_to_tree(graph)
    contents, records = {}, {}
    for v, content in iter_contents(tree):
        contents[v] = {key: r.ck for key, r in content.items()}
        for r in content.values():
            records.setdefault(r.ck, r)
    parent = {v: tree.parent(v) for v in tree.versions}
    children = {v: list(tree.children(v)) for v in tree.versions}
    it, item_of, objs = make_items(tree.root, parent, children, contents, records, k)
    return Placement(tree, contents, records, it, item_of, objs)


def place(graph_or_prepared: Union[VersionGraph, Placement], cfg: PartitionConfig, k: int = 1) -> Placement:
    pl = graph_or_prepared if isinstance(graph_or_prepared, Placement) else prepare(graph_or_prepared, k)
    t0 = time.perf_counter()
    pl.partitioning = partition(pl.item_tree, cfg)
    pl.seconds = time.perf_counter() - t0
    return pl


@dataclass
class PartitionRow:
    algorithm: str
    k: int
    capacity: int
    chunks: int
    total_span: int
    mean_span: float
    compression_ratio: float
    max_chunk_ratio: float
    overfull_frac: float
    within10_frac: float
    seconds: float
    extra: Dict[str, object] = field(default_factory=dict)


def report_row(pl: Placement, cfg: PartitionConfig, k: int) -> PartitionRow:
    spans = pl.spans()
    cap = capacity_report(pl.partitioning, cfg)
    return PartitionRow(cfg.algorithm, k, cfg.capacity, cap["chunks"], sum(spans.values()),
                        sum(spans.values()) / max(1, len(spans)), pl.compression_ratio(), cap["max_ratio"],
                        cap["overfull_frac"], cap["within10_frac"], pl.seconds, dict(pl.partitioning.stats))


def delta_pieces(graph: VersionGraph, capacity: int) -> Dict[VersionId, int]:
    """Backend objects per version when each version's delta (the root's
    full content for the root) is cut into capacity-sized pieces."""
    out = {}
    for v in graph.versions:
        ps = tuple(graph.parents[v])
        if ps:
            d = graph.delta(ps[0], v)
        else:
            d = Delta(None, v, adds=tuple(sorted(graph.root_records, key=lambda r: r.key)))
        out[v] = max(1, math.ceil(len(encode_keyed(v, ps, d)) / capacity))
    return out


def delta_q1_requests(graph: VersionGraph, capacity: int) -> int:
    """Requests for retrieving every version once by replaying delta chains."""
    pieces = delta_pieces(graph, capacity)
    memo: Dict[VersionId, int] = {}
    for v in graph.topo_order():
        ps = graph.parents[v]
        memo[v] = pieces[v] + (memo[ps[0]] if ps else 0)
    return sum(memo.values())
