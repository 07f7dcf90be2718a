"""Chunk partitioning of deduplicated items.

An item is a record (or a compressed sub-chunk standing in for several
records) identified by a composite key. Every algorithm works on an
:class:`ItemTree`: the version tree plus, for each version, the set of items
it contains. Items are packed into chunks of ``capacity`` bytes; a chunk
stops accepting items once it holds ``capacity`` bytes, and never grows past
``capacity * (1 + slack)``.
"""
from __future__ import annotations

import heapq
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .model import CompositeKey, GraphError, VersionGraph, VersionId, iter_contents

log = logging.getLogger(__name__)

Item = Hashable
VIRTUAL_ROOT = -1
ALGORITHMS = ("shingle", "bottomUp", "dfs", "bfs")


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionConfig:
    capacity: int = 10_000
    slack: float = 0.25
    shingles: int = 4
    beta: Optional[int] = None      # None = unlimited
    algorithm: str = "bottomUp"
    exact_multichild: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.capacity <= 0:
            raise PartitionError("capacity must be positive")
        if self.slack < 0:
            raise PartitionError("slack must be >= 0")
        if self.shingles < 1:
            raise PartitionError("need at least one shingle")
        if self.beta is not None and self.beta < 1:
            raise PartitionError("beta must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise PartitionError(f"unknown algorithm {self.algorithm!r}")

    @property
    def hard_limit(self) -> float:
        return self.capacity * (1 + self.slack)


@dataclass
class Chunk:
    id: int
    items: List[Item]
    byte_size: int
    chunk_map: Dict[VersionId, List[CompositeKey]] = field(default_factory=dict)


@dataclass
class Partitioning:
    chunks: List[Chunk]
    item_to_chunk: Dict[Item, int]
    algorithm: str = ""
    stats: Dict[str, object] = field(default_factory=dict)

    @property
    def chunk_count(self) -> int:
        return len(self.chunks)

    def chunk_of(self, item: Item) -> int:
        try:
            return self.item_to_chunk[item]
        except KeyError:
            raise PartitionError(f"item {item!r} is not partitioned") from None


@dataclass
class ItemTree:
    """Version tree annotated with per-version item sets.

    ``new_items[v]`` are the items of v that its parent lacks; in a tree
    those are exactly the items originating at v.
    """
    root: VersionId
    parent: Dict[VersionId, Optional[VersionId]]
    children: Dict[VersionId, List[VersionId]]
    contents: Dict[VersionId, Set[Item]]
    sizes: Dict[Item, int]

    def __post_init__(self):
        self.new_items: Dict[VersionId, List[Item]] = {}
        for v, p in self.parent.items():
            mine = self.contents[v]
            self.new_items[v] = sorted(mine if p is None else mine - self.contents[p])

    @property
    def versions(self) -> List[VersionId]:
        return sorted(self.parent)

    def items(self) -> List[Item]:
        return sorted(self.sizes)

    def depths(self) -> Dict[VersionId, int]:
        d = {self.root: 1}
        for v in self.bfs():
            for c in self.children[v]:
                d[c] = d[v] + 1
        return d

    def bfs(self) -> List[VersionId]:
        out = [self.root]
        i = 0
        while i < len(out):
            out.extend(self.children[out[i]])
            i += 1
        return out

    def dfs(self) -> List[VersionId]:
        out, stack = [], [self.root]
        while stack:
            v = stack.pop()
            out.append(v)
            stack.extend(reversed(self.children[v]))
        return out

    def postorder(self) -> List[VersionId]:
        return list(reversed(self._reverse_postorder()))

    def _reverse_postorder(self) -> List[VersionId]:
        # root, then children right-to-left, depth first: reversal gives post-order
        out, stack = [], [self.root]
        while stack:
            v = stack.pop()
            out.append(v)
            stack.extend(self.children[v])
        return out

    def is_chain(self) -> bool:
        return all(len(cs) <= 1 for cs in self.children.values())

    @staticmethod
    def from_tree(tree: VersionGraph) -> "ItemTree":
        """Records as items, sized by payload bytes."""
        if not tree.is_tree():
            raise GraphError("partitioners need a version tree; run dag_to_tree first")
        contents, sizes = {}, {}
        for v, content in iter_contents(tree):
            contents[v] = {r.ck for r in content.values()}
            for r in content.values():
                sizes[r.ck] = r.size
        return ItemTree(tree.root, {v: tree.parent(v) for v in tree.versions},
                        {v: list(tree.children(v)) for v in tree.versions}, contents, sizes)


# ---------------------------------------------------------------- packing

class _Packer:
    def __init__(self, cfg: PartitionConfig, sizes: Mapping[Item, int]):
        self.cap = cfg.capacity
        self.limit = cfg.hard_limit
        self.sizes = sizes
        self.sealed: List[List[Item]] = []
        self.cur: List[Item] = []
        self.cur_size = 0

    def add(self, item: Item) -> None:
        s = self.sizes[item]
        if s > self.limit:
            raise PartitionError(f"item {item!r} of {s} bytes exceeds chunk limit {self.limit:g}")
        if self.cur and (self.cur_size >= self.cap or self.cur_size + s > self.limit):
            self.seal()
        self.cur.append(item)
        self.cur_size += s

    def seal(self) -> None:
        if self.cur:
            self.sealed.append(self.cur)
        self.cur, self.cur_size = [], 0

    def take_partial(self) -> Optional[Tuple[List[Item], int]]:
        """Detach the open chunk if it is below capacity."""
        if not self.cur:
            return None
        if self.cur_size >= self.cap:
            self.seal()
            return None
        out = (self.cur, self.cur_size)
        self.cur, self.cur_size = [], 0
        return out


def merge_partials(partials: Sequence[Tuple[List[Item], int]], capacity: float) -> List[List[Item]]:
    """First-fit-decreasing over whole partial chunks."""
    order = sorted(range(len(partials)), key=lambda i: (-partials[i][1], i))
    bins: List[List[Item]] = []
    loads: List[int] = []
    for i in order:
        items, size = partials[i]
        for b in range(len(bins)):
            if loads[b] + size <= capacity:
                bins[b].extend(items)
                loads[b] += size
                break
        else:
            bins.append(list(items))
            loads.append(size)
    return bins


def _finish(groups: List[List[Item]], sizes: Mapping[Item, int], algorithm: str, **stats) -> Partitioning:
    chunks, where = [], {}
    for i, items in enumerate(groups):
        chunks.append(Chunk(i, list(items), sum(sizes[x] for x in items)))
        for x in items:
            if x in where:
                raise PartitionError(f"item {x!r} placed twice")
            where[x] = i
    return Partitioning(chunks, where, algorithm, dict(stats))


def _check_cover(p: Partitioning, it: ItemTree) -> None:
    if len(p.item_to_chunk) != len(it.sizes):
        missing = set(it.sizes) - set(p.item_to_chunk)
        raise PartitionError(f"{len(missing)} items left unpartitioned")


# ---------------------------------------------------------------- shingles

_MASK = (1 << 64) - 1


def hash_family(l: int, seed: int = 0) -> np.ndarray:
    """``l`` multiply-shift hash functions as (a, b) pairs with odd ``a``."""
    rng = np.random.default_rng([seed, 7])
    a = rng.integers(0, 2**63, size=l, dtype=np.uint64) * np.uint64(2) + np.uint64(1)
    b = rng.integers(0, 2**63, size=l, dtype=np.uint64)
    return np.stack([a, b], axis=1)


def hash_versions(versions: Sequence[int], family: np.ndarray) -> np.ndarray:
    """h_i(v) for every version (rows) and hash function (columns); the top
    32 bits of a*v + b mod 2**64."""
    v = np.asarray(versions, dtype=np.int64).astype(np.uint64)[:, None]
    with np.errstate(over="ignore"):
        return (family[:, 0][None, :] * v + family[:, 1][None, :]) >> np.uint64(32)


def compute_shingles(version_set: Iterable[int], family: np.ndarray) -> Tuple[int, ...]:
    vs = sorted(set(version_set))
    if not vs:
        raise PartitionError("shingles of an empty version set")
    return tuple(int(x) for x in hash_versions(vs, family).min(axis=0))


def shingle_partition(it: ItemTree, cfg: PartitionConfig) -> Partitioning:
    items = it.items()
    index = {x: i for i, x in enumerate(items)}
    family = hash_family(cfg.shingles, cfg.seed)
    versions = it.versions
    hv = hash_versions(versions, family)
    sh = np.full((len(items), cfg.shingles), np.iinfo(np.uint64).max, dtype=np.uint64)
    for row, v in enumerate(versions):
        if not it.contents[v]:
            continue
        idx = np.fromiter((index[x] for x in it.contents[v]), dtype=np.int64, count=len(it.contents[v]))
        sh[idx] = np.minimum(sh[idx], hv[row])
    keys = [tuple(int(y) for y in sh[i]) for i in range(len(items))]
    order = sorted(range(len(items)), key=lambda i: (keys[i], items[i]))
    pk = _Packer(cfg, it.sizes)
    for i in order:
        pk.add(items[i])
    pk.seal()
    p = _finish(pk.sealed, it.sizes, "shingle")
    _check_cover(p, it)
    return p


# ---------------------------------------------------------------- traversals

def _traversal_partition(it: ItemTree, cfg: PartitionConfig, order: List[VersionId], name: str) -> Partitioning:
    pk = _Packer(cfg, it.sizes)
    for v in order:
        for x in it.new_items[v]:
            pk.add(x)
    pk.seal()
    p = _finish(pk.sealed, it.sizes, name)
    _check_cover(p, it)
    return p


def dfs_partition(it: ItemTree, cfg: PartitionConfig) -> Partitioning:
    return _traversal_partition(it, cfg, it.dfs(), "dfs")


def bfs_partition(it: ItemTree, cfg: PartitionConfig) -> Partitioning:
    return _traversal_partition(it, cfg, it.bfs(), "bfs")


# ---------------------------------------------------------------- bottom-up

@dataclass
class _Carry:
    """What a version hands to its parent: for each of its items the number
    of versions below (inclusive) that still hold it, and the node of the
    bucket tree the item is filed under."""
    count: Dict[Item, int]
    anchor: Dict[Item, VersionId]
    # bucket tree (only kept when beta is finite): node -> nearest live ancestor
    up: Dict[VersionId, Optional[VersionId]]
    live_children: Dict[VersionId, int]


def bottom_up_partition(it: ItemTree, cfg: PartitionConfig,
                        trace: Optional[Callable[[VersionId, Dict[int, Set[Item]]], None]] = None) -> Partitioning:
    """Post-order pass. At version v, the items of each child that v lacks
    are exclusive to that child's subtree: they are chunked right away, the
    ones shared by the most consecutive versions first, each version's batch
    starting a fresh chunk. Items v still holds are carried up together with
    how far down they persist.

    ``trace(v, alpha)`` receives the exclusive sets grouped by persistence.
    """
    depth = it.depths()
    beta = cfg.beta
    pk = _Packer(cfg, it.sizes)
    partials: List[Tuple[List[Item], int]] = []
    carries: Dict[VersionId, _Carry] = {}
    merges = 0
    chain = it.is_chain()

    def weight(child: VersionId, anchor: VersionId, count: int) -> int:
        if cfg.exact_multichild:
            return count
        return depth[anchor] - depth[child] + 1

    def emit(batches: List[Tuple[int, VersionId, VersionId, Item]]) -> None:
        if not batches:
            return
        batches.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
        chunked: Set[Item] = set()     # de-duplication table across children
        for _, _, _, x in batches:
            if x in chunked:
                continue
            chunked.add(x)
            pk.add(x)
        part = pk.take_partial()
        if part:
            partials.append(part)

    for v in it.postorder():
        kids = it.children[v]
        mine = it.contents[v]
        count: Dict[Item, int] = {}
        anchor: Dict[Item, VersionId] = {}
        best: Dict[Item, Tuple[int, VersionId]] = {}
        exclusive: List[Tuple[int, VersionId, VersionId, Item]] = []
        alpha: Dict[int, Set[Item]] = defaultdict(set)
        for c in kids:
            cc = carries[c]
            for x, n in cc.count.items():
                if x in mine:
                    count[x] = count.get(x, 1) + n
                    b = best.get(x)
                    if b is None or n > b[0]:
                        best[x] = (n, c)
                else:
                    w = weight(c, cc.anchor[x], n)
                    exclusive.append((w, c, cc.anchor[x], x))
                    alpha[w].add(x)
        for x in mine:
            if x in best:
                anchor[x] = carries[best[x][1]].anchor[x]
            else:
                count[x] = 1
                anchor[x] = v
        if chain and alpha:
            total = sum(len(s) for s in alpha.values())
            if total != len(set().union(*alpha.values())):
                raise AssertionError(f"exclusive sets overlap at V{v}")
        if trace is not None:
            trace(v, dict(alpha))
        emit(exclusive)

        up: Dict[VersionId, Optional[VersionId]] = {v: None}
        live: Dict[VersionId, int] = {v: 0}
        if beta is not None:
            for c in kids:
                cc = carries[c]
                for node, par in cc.up.items():
                    up[node] = v if par is None else par
                    live[node] = cc.live_children[node]
                live[v] += 1
            if len(up) > beta:
                buckets: Dict[VersionId, List[Item]] = defaultdict(list)
                for x, a in anchor.items():
                    buckets[a].append(x)
                heap = [(len(buckets[n]), n) for n in up if live[n] == 0 and n != v]
                heapq.heapify(heap)
                while len(up) > beta and heap:
                    _, leaf = heapq.heappop(heap)
                    par = up.pop(leaf)
                    moved = buckets.pop(leaf, [])
                    for x in moved:
                        anchor[x] = par
                    buckets[par].extend(moved)
                    merges += 1
                    live[par] -= 1
                    del live[leaf]
                    if live[par] == 0 and par != v:
                        heapq.heappush(heap, (len(buckets[par]), par))
        carries[v] = _Carry(count, anchor, up, live)
        for c in kids:
            del carries[c]

    # the root's own items, as if chunked by a parent above the root
    rc = carries.pop(it.root)
    final = [(weight(it.root, rc.anchor[x], n), it.root, rc.anchor[x], x) for x, n in rc.count.items()]
    if trace is not None:
        alpha = defaultdict(set)
        for w, _, _, x in final:
            alpha[w].add(x)
        trace(VIRTUAL_ROOT, dict(alpha))
    emit(final)
    pk.seal()
    groups = pk.sealed + merge_partials(partials, cfg.capacity)
    p = _finish(groups, it.sizes, "bottomUp", merges=merges, partials=len(partials))
    _check_cover(p, it)
    return p


# ---------------------------------------------------------------- dispatch

def partition(it: ItemTree, cfg: PartitionConfig) -> Partitioning:
    fn = {"shingle": shingle_partition, "bottomUp": bottom_up_partition,
          "dfs": dfs_partition, "bfs": bfs_partition}[cfg.algorithm]
    return fn(it, cfg)


def version_spans(p: Partitioning, contents: Mapping[VersionId, Iterable[Item]],
                  item_of: Optional[Mapping] = None) -> Dict[VersionId, int]:
    """Number of distinct chunks holding the items of each version.
    ``item_of`` maps a version's entries (e.g. records) to partitioned items."""
    out = {}
    for v, xs in contents.items():
        seen = set()
        for x in xs:
            if item_of is not None:
                x = item_of[x]
            seen.add(p.chunk_of(x))
        out[v] = len(seen)
    return out


def total_span(p: Partitioning, contents: Mapping[VersionId, Iterable[Item]], item_of=None) -> int:
    return sum(version_spans(p, contents, item_of).values())


def bytes_touched(p: Partitioning, contents: Mapping[VersionId, Iterable[Item]], item_of=None) -> Dict[VersionId, int]:
    sizes = [c.byte_size for c in p.chunks]
    out = {}
    for v, xs in contents.items():
        ids = {p.chunk_of(item_of[x] if item_of is not None else x) for x in xs}
        out[v] = sum(sizes[i] for i in ids)
    return out


def build_chunk_maps(p: Partitioning, contents: Mapping[VersionId, Iterable[CompositeKey]],
                     item_of: Optional[Mapping] = None) -> Partitioning:
    """Fill every chunk's map version -> composite keys it stores for that
    version. ``contents[v]`` lists v's records; ``item_of`` resolves a record
    to the item holding it when items are sub-chunks."""
    for c in p.chunks:
        c.chunk_map = {}
    for v in sorted(contents):
        for ck in sorted(contents[v]):
            c = p.chunks[p.chunk_of(item_of[ck] if item_of is not None else ck)]
            c.chunk_map.setdefault(v, []).append(ck)
    return p


def capacity_report(p: Partitioning, cfg: PartitionConfig) -> Dict[str, float]:
    sizes = [c.byte_size for c in p.chunks]
    n = len(sizes) or 1
    return {
        "chunks": len(sizes),
        "max_ratio": max(sizes, default=0) / cfg.capacity,
        "overfull_frac": sum(s > cfg.capacity for s in sizes) / n,
        "within10_frac": sum(s <= 1.1 * cfg.capacity for s in sizes) / n,
        "underhalf": sum(s < cfg.capacity / 2 for s in sizes),
    }
