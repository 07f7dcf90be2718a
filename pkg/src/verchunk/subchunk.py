"""Sub-chunks: up to k records of one primary key, compressed together.

Construction is bottom-up over the version tree. For a key K at version v,
the groups handed up by v's children are attached to v's K-record when they
derive from it; groups are sealed once they reach k records, when nothing
above can extend them, or at the root. Members of a sealed sub-chunk always
hold records whose versions form a connected part of the tree.
"""
from __future__ import annotations

import heapq
import os
import struct
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Set, Tuple

from . import codec
from .model import CompositeKey, GraphError, PrimaryKey, Record, VersionGraph, VersionId, iter_contents
from .partition import ItemTree

KeyedContent = Mapping[PrimaryKey, CompositeKey]


@dataclass(frozen=True)
class Skeleton:
    """Composite keys of a sub-chunk, base first; ``parents[i]`` is the
    member that member i is delta-encoded against."""
    key: PrimaryKey
    members: Tuple[CompositeKey, ...]
    parents: Tuple[int, ...]
    seq: int = 0

    def __len__(self) -> int:
        return len(self.members)


class SubChunk:
    """Same-key records stored as one compressed frame. Read from bytes, a
    member is only decoded when it (or a member encoded against it) is asked
    for. Two sub-chunks are equal when their frames are."""

    __slots__ = ("key", "parents", "rep_ck", "compressed", "k", "_frame")

    def __init__(self, frame: codec.MemberFrame, rep_ck: CompositeKey, compressed: bytes):
        self._frame = frame
        self.key: PrimaryKey = frame.key
        self.parents: List[int] = frame.parents
        self.rep_ck = rep_ck
        self.compressed = compressed
        self.k = frame.k

    @property
    def origins(self) -> List[VersionId]:
        return self._frame.origins

    @property
    def cks(self) -> Tuple[CompositeKey, ...]:
        return tuple(CompositeKey(self.key, o) for o in self._frame.origins)

    @property
    def members(self) -> List[Record]:
        f = self._frame
        return [Record(CompositeKey(self.key, o), f.payload(i)) for i, o in enumerate(f.origins)]

    def select(self, want) -> List[Record]:
        """Members whose composite key is in ``want``, decoding only those."""
        f = self._frame
        return [Record(CompositeKey(self.key, o), f.payload(i)) for i, o in enumerate(f.origins)
                if CompositeKey(self.key, o) in want]

    @property
    def raw_size(self) -> int:
        return sum(len(self._frame.payload(i)) for i in range(len(self._frame.origins)))

    @property
    def size(self) -> int:
        return len(self.compressed)

    @staticmethod
    def build(members: Sequence[Record], parents: Sequence[int], rep_ck: CompositeKey,
              k: int = 0, block: bool = False) -> "SubChunk":
        data = codec.compress_members(members, parents, k, block)
        frame = codec.parse_members(data)
        frame.decoded.update((i, m.payload) for i, m in enumerate(members) if i)
        return SubChunk(frame, rep_ck, data)

    @staticmethod
    def from_bytes(data: bytes, rep_ck: Optional[CompositeKey] = None) -> "SubChunk":
        frame = codec.parse_members(data)
        return SubChunk(frame, rep_ck or CompositeKey(frame.key, frame.origins[0]), bytes(data))

    def member(self, ck: CompositeKey) -> Record:
        if ck.key == self.key and ck.origin in self._frame.origins:
            return Record(ck, self._frame.payload(self._frame.origins.index(ck.origin)))
        raise KeyError(ck)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SubChunk):
            return NotImplemented
        return self.compressed == other.compressed and self.rep_ck == other.rep_ck

    def __hash__(self) -> int:
        return hash(self.compressed)

    def __repr__(self) -> str:
        return f"SubChunk({self.key!r}, origins={self._frame.origins}, rep={self.rep_ck!r}, {self.size} bytes)"


@dataclass
class TreeView:
    """Version tree as seen by the sub-chunker: structure plus, per version,
    primary key -> composite key of the record present."""
    root: VersionId
    children: Dict[VersionId, List[VersionId]]
    contents: Dict[VersionId, Dict[PrimaryKey, CompositeKey]]
    parent: Dict[VersionId, Optional[VersionId]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.parent:
            self.parent = {self.root: None}
            for v, cs in self.children.items():
                for c in cs:
                    self.parent[c] = v

    @staticmethod
    def from_tree(tree: VersionGraph) -> "TreeView":
        if not tree.is_tree():
            raise GraphError("sub-chunk construction needs a version tree")
        contents = {v: {k: r.ck for k, r in c.items()} for v, c in iter_contents(tree)}
        return TreeView(tree.root, {v: list(tree.children(v)) for v in tree.versions}, contents)

    def postorder(self) -> List[VersionId]:
        out, stack = [], [self.root]
        while stack:
            v = stack.pop()
            out.append(v)
            stack.extend(self.children.get(v, []))
        out.reverse()
        return out

    def bfs(self) -> List[VersionId]:
        out = [self.root]
        i = 0
        while i < len(out):
            out.extend(self.children.get(out[i], []))
            i += 1
        return out

    def derived_from(self, ck: CompositeKey) -> Optional[CompositeKey]:
        """The record that ``ck`` replaced in its origin's parent, if any."""
        p = self.parent.get(ck.origin)
        if p is None:
            return None
        return self.contents[p].get(ck.key)


def construct_subchunks(view: TreeView, k: int) -> List[Skeleton]:
    """Bottom-up grouping of same-key records into sub-chunks of at most k.

    Returned skeletons are ordered by primary key, then by sealing order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    sealed: List[Tuple[PrimaryKey, int, List[CompositeKey]]] = []
    pending: Dict[VersionId, Dict[PrimaryKey, List[List[CompositeKey]]]] = {}

    def seal(key, group):
        sealed.append((key, len(sealed), group))

    def seal_largest(key, groups):
        i = max(range(len(groups)), key=lambda j: (len(groups[j]), -min(c.origin for c in groups[j])))
        seal(key, groups.pop(i))

    for v in view.postorder():
        content = view.contents[v]
        incoming: Dict[PrimaryKey, List[List[CompositeKey]]] = defaultdict(list)
        for c in view.children.get(v, []):
            for key, groups in pending.pop(c).items():
                incoming[key].extend(groups)
        keys = set(incoming)
        keys.update(key for key, ck in content.items() if ck.origin == v)
        up: Dict[PrimaryKey, List[List[CompositeKey]]] = {}
        is_root = v == view.root
        for key in sorted(keys):
            groups = incoming.get(key, [])
            own = content.get(key)
            if own is None:
                for g in groups:
                    seal(key, g)
                continue
            size = sum(len(g) for g in groups)
            if own.origin == v:
                while size >= k:
                    seal_largest(key, groups)
                    size = sum(len(g) for g in groups)
                merged = [own] + [c for g in groups for c in g]
                if size == k - 1 or is_root:
                    seal(key, merged)
                else:
                    up[key] = [merged]
            else:
                while size >= k:
                    seal_largest(key, groups)
                    size = sum(len(g) for g in groups)
                if is_root:
                    for g in groups:
                        seal(key, g)
                elif groups:
                    up[key] = groups
        pending[v] = up
    for groups in pending.pop(view.root, {}).values():
        for g in groups:
            seal(g[0].key, g)

    out = []
    depth = _depths(view)
    for key, seq, group in sorted(sealed, key=lambda t: (t[0], t[1])):
        members = sorted(group, key=lambda c: (depth.get(c.origin, 0), c.origin))
        pos = {c: i for i, c in enumerate(members)}
        parents = []
        for i, c in enumerate(members):
            d = view.derived_from(c) if i else None
            parents.append(pos[d] if d in pos and pos[d] < i else 0)
        out.append(Skeleton(key, tuple(members), tuple(parents), seq))
    return out


def _depths(view: TreeView) -> Dict[VersionId, int]:
    d = {view.root: 0}
    for v in view.bfs():
        for c in view.children.get(v, []):
            d[c] = d[v] + 1
    return d


def check_connected(view: TreeView, members: Iterable[CompositeKey]) -> bool:
    """True when the versions holding any of ``members`` form a connected
    part of the tree."""
    ms = set(members)
    holding = {v for v, content in view.contents.items() if any(content.get(c.key) == c for c in ms)}
    if not holding:
        return False
    # connected iff exactly one holding version has a non-holding parent
    tops = [v for v in holding if view.parent.get(v) not in holding]
    return len(tops) == 1


@dataclass
class TransformedTree:
    view: TreeView                                  # survivors only
    items: Dict[VersionId, Set[CompositeKey]]       # survivor -> rep keys of its sub-chunks
    rep_of: Dict[int, CompositeKey]                 # skeleton index -> rep key
    sub_of: Dict[CompositeKey, int]                 # record -> skeleton index
    duplicates: Dict[VersionId, VersionId]          # removed version -> survivor

    def survivor(self, v: VersionId) -> VersionId:
        return self.duplicates.get(v, v)

    def item_of(self) -> Dict[CompositeKey, CompositeKey]:
        return {ck: self.rep_of[i] for ck, i in self.sub_of.items()}

    def item_tree(self, sizes: Mapping[CompositeKey, int]) -> ItemTree:
        v = self.view
        return ItemTree(v.root, dict(v.parent), {x: list(cs) for x, cs in v.children.items()},
                        {x: set(s) for x, s in self.items.items()}, dict(sizes))


def transform_tree(view: TreeView, skeletons: Sequence[Skeleton]) -> TransformedTree:
    """Breadth-first: each sub-chunk takes as representative the composite
    key of its first record met; a version whose sub-chunk set equals its
    (surviving) parent's is dropped and redirected to that survivor."""
    sub_of = {}
    for i, s in enumerate(skeletons):
        for c in s.members:
            if c in sub_of:
                raise ValueError(f"{c!r} is in two sub-chunks")
            sub_of[c] = i
    rep_of: Dict[int, CompositeKey] = {}
    items: Dict[VersionId, Set[CompositeKey]] = {}
    survivor: Dict[VersionId, VersionId] = {}
    children: Dict[VersionId, List[VersionId]] = {}
    parent: Dict[VersionId, Optional[VersionId]] = {}
    for v in view.bfs():
        content = view.contents[v]
        for key in sorted(content):
            c = content[key]
            if c.origin == v and sub_of[c] not in rep_of:
                rep_of[sub_of[c]] = c
        mine = set()
        for c in content.values():
            i = sub_of.get(c)
            if i is None:
                raise ValueError(f"{c!r} is in no sub-chunk")
            mine.add(rep_of[i])
        p = view.parent.get(v)
        if p is not None and mine == items[survivor[p]]:
            survivor[v] = survivor[p]
            continue
        survivor[v] = v
        items[v] = mine
        children[v] = []
        if p is not None:
            sp = survivor[p]
            parent[v] = sp
            children[sp].append(v)
        else:
            parent[v] = None
    for cs in children.values():
        cs.sort()
    tv = TreeView(view.root, children, {v: view.contents[v] for v in items}, parent)
    dups = {v: s for v, s in survivor.items() if v != s}
    return TransformedTree(tv, items, rep_of, sub_of, dups)


def build_subchunks(skeletons: Sequence[Skeleton], records: Mapping[CompositeKey, Record],
                    reps: Mapping[int, CompositeKey], k: int = 0, block: bool = False) -> List[SubChunk]:
    out = []
    for i, s in enumerate(skeletons):
        members = [records[c] for c in s.members]
        out.append(SubChunk.build(members, s.parents, reps.get(i, s.members[0]), k, block))
    return out


def compression_ratio(subchunks: Iterable[SubChunk]) -> float:
    raw = comp = 0
    for s in subchunks:
        raw += s.raw_size
        comp += s.size
    return raw / comp if comp else 1.0


# ------------------------------------------------------------ external sort

_REC = struct.Struct("<IQI")


def _write_run(run: List[Record], tmpdir: str) -> str:
    run.sort(key=lambda r: r.ck)
    fd, path = tempfile.mkstemp(prefix="run-", dir=tmpdir)
    with os.fdopen(fd, "wb") as f:
        for r in run:
            f.write(_REC.pack(len(r.key), r.origin, len(r.payload)))
            f.write(r.key)
            f.write(r.payload)
    return path


def _read_run(path: str) -> Iterator[Record]:
    with open(path, "rb", buffering=1 << 16) as f:
        while True:
            head = f.read(_REC.size)
            if not head:
                return
            klen, origin, plen = _REC.unpack(head)
            key = f.read(klen)
            yield Record(CompositeKey(key, origin), f.read(plen))


def external_sort(records: Iterable[Record], run_records: int = 100_000,
                  tmpdir: Optional[str] = None) -> Iterator[Record]:
    """Sort by composite key through sorted runs of ``run_records`` records
    spilled to scratch files, then a k-way merge."""
    with tempfile.TemporaryDirectory(dir=tmpdir) as d:
        paths, run = [], []
        for r in records:
            run.append(r)
            if len(run) >= run_records:
                paths.append(_write_run(run, d))
                run = []
        if not paths:
            run.sort(key=lambda r: r.ck)
            yield from run
            return
        if run:
            paths.append(_write_run(run, d))
        yield from heapq.merge(*(_read_run(p) for p in paths), key=lambda r: r.ck)


class UnsortedStreamError(ValueError):
    pass


@dataclass
class MaterializeStats:
    subchunks: int = 0
    records: int = 0
    peak_resident: int = 0
    max_key_records: int = 0


def materialize_subchunks(stream: Iterable[Record], skeletons: Sequence[Skeleton],
                          sink: Callable[[SubChunk], None], reps: Optional[Mapping[int, CompositeKey]] = None,
                          k: int = 0, block: bool = False) -> MaterializeStats:
    """One pass over records sorted by primary key: when a key's records are
    all resident, its sub-chunks are compressed and handed to ``sink``."""
    by_key: Dict[PrimaryKey, List[int]] = defaultdict(list)
    for i, s in enumerate(skeletons):
        by_key[s.key].append(i)
    reps = reps or {}
    stats = MaterializeStats()
    held: Dict[CompositeKey, Record] = {}
    cur: Optional[PrimaryKey] = None

    def flush():
        for i in by_key.get(cur, []):
            s = skeletons[i]
            try:
                members = [held[c] for c in s.members]
            except KeyError as e:
                raise ValueError(f"record {e.args[0]!r} missing from the stream") from None
            sink(SubChunk.build(members, s.parents, reps.get(i, s.members[0]), k, block))
            stats.subchunks += 1
        stats.max_key_records = max(stats.max_key_records, len(held))
        held.clear()

    for r in stream:
        if cur is not None and r.key < cur:
            raise UnsortedStreamError(f"{r.key!r} after {cur!r}: stream is not sorted by key")
        if r.key != cur:
            if cur is not None:
                flush()
            cur = r.key
        held[r.ck] = r
        stats.records += 1
        stats.peak_resident = max(stats.peak_resident, len(held))
    if cur is not None:
        flush()
    return stats
