"""Versions, records, composite keys and the delta algebra.

A record is identified by its composite key: the primary key plus the id of
the version in which that payload first appeared. Versions are connected by
deltas; a delta names the records it adds, the records it updates (same
primary key as a parent record, new payload) and the composite keys it
deletes. ``materialize`` replays deltas from the root and is the reference
oracle every engine is checked against.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Set, Tuple

VersionId = int
PrimaryKey = bytes


class DeltaError(ValueError):
    """A delta is inconsistent with itself or with the records it is applied to."""


class GraphError(ValueError):
    """Malformed version graph or unknown version id."""


class CompositeKey(NamedTuple):
    key: PrimaryKey
    origin: VersionId

    def __repr__(self) -> str:
        return f"<{self.key.decode('latin-1')},V{self.origin}>"


@dataclass(frozen=True, slots=True)
class Record:
    ck: CompositeKey
    payload: bytes

    @property
    def key(self) -> PrimaryKey:
        return self.ck.key

    @property
    def origin(self) -> VersionId:
        return self.ck.origin

    @property
    def size(self) -> int:
        return len(self.payload)


Content = Dict[PrimaryKey, Record]


def as_content(records: Iterable[Record] | Mapping[PrimaryKey, Record]) -> Content:
    if isinstance(records, Mapping):
        return dict(records)
    out: Content = {}
    for r in records:
        if r.key in out:
            raise DeltaError(f"two records share primary key {r.key!r}")
        out[r.key] = r
    return out


@dataclass(frozen=True)
class Delta:
    """Changes from ``parent`` to ``child``.

    ``imports`` only occurs on edges into merge versions: records taken over
    from another parent, keeping their original composite key.
    """
    parent: Optional[VersionId]
    child: VersionId
    adds: Tuple[Record, ...] = ()
    updates: Tuple[Record, ...] = ()
    deletes: Tuple[CompositeKey, ...] = ()
    imports: Tuple[Record, ...] = ()

    def __post_init__(self):
        for name in ("adds", "updates", "deletes", "imports"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        seen: Set[PrimaryKey] = set()
        for r in self.adds + self.updates:
            if r.origin != self.child:
                raise DeltaError(f"{r.ck!r} added in V{self.child} must originate there")
        for r in self.adds + self.updates + self.imports:
            if r.key in seen:
                raise DeltaError(f"primary key {r.key!r} written twice in one delta")
            seen.add(r.key)
        for ck in self.deletes:
            if ck.key in seen:
                raise DeltaError(f"{ck!r} is both deleted and written")
            seen.add(ck.key)
        plus = {r.ck for r in self.adds + self.updates + self.imports}
        if plus & set(self.deletes):
            raise DeltaError("positive and negative sets overlap")

    @property
    def plus(self) -> Tuple[Record, ...]:
        return self.adds + self.updates + self.imports

    def is_empty(self) -> bool:
        return not (self.adds or self.updates or self.deletes or self.imports)

    @staticmethod
    def between(parent: Optional[VersionId], child: VersionId,
                before: Mapping[PrimaryKey, Record], after: Mapping[PrimaryKey, Record]) -> "Delta":
        """Diff two contents. Records in ``after`` that neither exist in
        ``before`` nor originate at ``child`` become imports."""
        adds, updates, imports, deletes = [], [], [], []
        for key in sorted(after):
            r = after[key]
            old = before.get(key)
            if old is not None and old.ck == r.ck:
                continue
            if r.origin != child:
                imports.append(r)
            elif old is None:
                adds.append(r)
            else:
                updates.append(r)
        for key in sorted(before):
            if key not in after:
                deletes.append(before[key].ck)
        return Delta(parent, child, tuple(adds), tuple(updates), tuple(deletes), tuple(imports))


def apply_to_content(content: Mapping[PrimaryKey, Record], d: Delta) -> Content:
    out = dict(content)
    for ck in d.deletes:
        cur = out.get(ck.key)
        if cur is None or cur.ck != ck:
            raise DeltaError(f"delete of {ck!r} which is not in the parent")
        del out[ck.key]
    for r in d.adds:
        if r.key in out:
            raise DeltaError(f"add of existing primary key {r.key!r}")
        out[r.key] = r
    for r in d.updates:
        if r.key not in out:
            raise DeltaError(f"update of missing primary key {r.key!r}")
        out[r.key] = r
    for r in d.imports:
        out[r.key] = r
    return out


def apply_delta(records: Iterable[Record] | Mapping[PrimaryKey, Record], d: Delta) -> Set[Record]:
    return set(apply_to_content(as_content(records), d).values())


@dataclass(frozen=True)
class SignedDelta:
    """Plain set difference between two record sets: target = (source - minus) | plus."""
    plus: frozenset
    minus: frozenset

    @staticmethod
    def of(source: Iterable[Record], target: Iterable[Record]) -> "SignedDelta":
        s, t = set(source), set(target)
        return SignedDelta(frozenset(t - s), frozenset(s - t))

    def inverse(self) -> "SignedDelta":
        return SignedDelta(self.minus, self.plus)

    def apply(self, records: Iterable[Record]) -> Set[Record]:
        rs = set(records)
        if not self.minus <= rs:
            raise DeltaError("signed delta removes records that are not present")
        if self.plus & (rs - self.minus):
            raise DeltaError("signed delta adds records that are already present")
        return (rs - self.minus) | self.plus


@dataclass
class VersionGraph:
    """Derivation DAG. ``parents[v]`` lists v's parents, the first one being
    the edge that ``materialize`` follows. ``deltas`` is keyed by edge."""
    root: VersionId
    root_records: Tuple[Record, ...] = ()
    parents: Dict[VersionId, Tuple[VersionId, ...]] = field(default_factory=dict)
    deltas: Dict[Tuple[VersionId, VersionId], Delta] = field(default_factory=dict)
    _children: Dict[VersionId, List[VersionId]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.parents.setdefault(self.root, ())
        for r in self.root_records:
            if r.origin != self.root:
                raise DeltaError(f"root record {r.ck!r} must originate at the root")
        self._children = {v: [] for v in self.parents}
        for v, ps in self.parents.items():
            for p in ps:
                self._children.setdefault(p, []).append(v)
        for cs in self._children.values():
            cs.sort()

    # structure
    def __contains__(self, v) -> bool:
        return v in self.parents

    def __len__(self) -> int:
        return len(self.parents)

    @property
    def versions(self) -> List[VersionId]:
        return sorted(self.parents)

    def children(self, v: VersionId) -> List[VersionId]:
        return self._children.get(v, [])

    def parent(self, v: VersionId) -> Optional[VersionId]:
        ps = self.parents[v]
        return ps[0] if ps else None

    def is_tree(self) -> bool:
        return all(len(ps) <= 1 for ps in self.parents.values())

    def merges(self) -> List[VersionId]:
        return sorted(v for v, ps in self.parents.items() if len(ps) > 1)

    def add_version(self, child: VersionId, parents: Sequence[VersionId], deltas: Sequence[Delta] = ()) -> None:
        if child in self.parents:
            raise GraphError(f"version {child} already exists")
        if not parents:
            raise GraphError("only the root may lack a parent")
        for p in parents:
            if p not in self.parents:
                raise GraphError(f"unknown parent {p}")
        self.parents[child] = tuple(parents)
        self._children[child] = []
        for p in parents:
            self._children[p].append(child)
            self._children[p].sort()
        for d in deltas:
            if d.child != child or d.parent not in parents:
                raise GraphError(f"delta {d.parent}->{d.child} does not match an edge of {child}")
            self.deltas[(d.parent, child)] = d

    def delta(self, parent: VersionId, child: VersionId) -> Delta:
        try:
            return self.deltas[(parent, child)]
        except KeyError:
            raise GraphError(f"no delta on edge {parent}->{child}") from None

    def topo_order(self) -> List[VersionId]:
        """Kahn order with smallest id first among ready versions."""
        import heapq
        indeg = {v: len(ps) for v, ps in self.parents.items()}
        ready = [v for v, n in indeg.items() if n == 0]
        heapq.heapify(ready)
        out = []
        while ready:
            v = heapq.heappop(ready)
            out.append(v)
            for c in self.children(v):
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, c)
        if len(out) != len(self.parents):
            raise GraphError("version graph has a cycle")
        return out

    def bfs_order(self) -> List[VersionId]:
        out, q, seen = [], deque([self.root]), {self.root}
        while q:
            v = q.popleft()
            out.append(v)
            for c in self.children(v):
                if c not in seen:
                    seen.add(c)
                    q.append(c)
        return out

    def dfs_order(self) -> List[VersionId]:
        out, stack, seen = [], [self.root], set()
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            out.append(v)
            stack.extend(reversed(self.children(v)))
        return out

    def depths(self) -> Dict[VersionId, int]:
        """Depth along first-parent edges; the root has depth 1."""
        d = {}
        for v in self.topo_order():
            p = self.parent(v)
            d[v] = 1 if p is None else d[p] + 1
        return d

    def leaves(self) -> List[VersionId]:
        return [v for v in self.versions if not self.children(v)]

    def path_from_root(self, v: VersionId) -> List[VersionId]:
        if v not in self.parents:
            raise GraphError(f"unknown version {v}")
        path = [v]
        while self.parents[path[-1]]:
            path.append(self.parents[path[-1]][0])
        path.reverse()
        return path

    def validate(self) -> None:
        roots = [v for v, ps in self.parents.items() if not ps]
        if roots != [self.root]:
            raise GraphError(f"expected single root {self.root}, found {roots}")
        self.topo_order()
        for v, ps in self.parents.items():
            for p in ps:
                if (p, v) not in self.deltas:
                    raise GraphError(f"missing delta on edge {p}->{v}")
        contents = materialize_all(self)
        for (p, c), d in self.deltas.items():
            if apply_to_content(contents[p], d) != contents[c]:
                raise GraphError(f"edge {p}->{c} disagrees with first-parent content")


@dataclass
class VersionTree(VersionGraph):
    """Version graph without merges. ``rename_log`` maps composite keys
    synthesized during DAG conversion back to the original ones."""
    rename_log: Dict[CompositeKey, CompositeKey] = field(default_factory=dict)

    def __post_init__(self):
        super().__post_init__()
        if not self.is_tree():
            raise GraphError("version tree has a merge")

    def original(self, ck: CompositeKey) -> CompositeKey:
        return self.rename_log.get(ck, ck)

    def restore(self, r: Record) -> Record:
        ck = self.rename_log.get(r.ck)
        return r if ck is None else Record(ck, r.payload)


def iter_contents(graph: VersionGraph) -> Iterator[Tuple[VersionId, Content]]:
    """Yield (version, content) in topological order, keeping only contents
    that are still needed by unvisited children."""
    order = graph.topo_order()
    remaining = {v: len(graph.children(v)) for v in order}
    live: Dict[VersionId, Content] = {}
    for v in order:
        p = graph.parent(v)
        if p is None:
            content = as_content(graph.root_records)
        else:
            content = apply_to_content(live[p], graph.delta(p, v))
            remaining[p] -= 1
            # non-first parents also count down; their content is not used
            for q in graph.parents[v][1:]:
                remaining[q] -= 1
        yield v, content
        live[v] = content
        for q in graph.parents[v]:
            if remaining[q] == 0 and q in live:
                del live[q]
        if remaining[v] == 0:
            live.pop(v, None)


def materialize_all(graph: VersionGraph) -> Dict[VersionId, Content]:
    return dict(iter_contents(graph))


def materialize(graph: VersionGraph, v: VersionId) -> Set[Record]:
    content: Content = {}
    for u in graph.path_from_root(v):
        p = graph.parent(u)
        content = as_content(graph.root_records) if p is None else apply_to_content(content, graph.delta(p, u))
    return set(content.values())


def dag_to_tree(graph: VersionGraph) -> VersionTree:
    """Keep one parent per merge version (largest record overlap, then
    smallest id). Records a merge version received only through a severed
    edge are re-keyed with the merge version as origin."""
    order = graph.topo_order()
    contents = materialize_all(graph)
    # per version: original composite key -> stored record in the tree
    mapped: Dict[VersionId, Dict[CompositeKey, Record]] = {}
    tparents: Dict[VersionId, Tuple[VersionId, ...]] = {}
    rename: Dict[CompositeKey, CompositeKey] = {}
    for v in order:
        ps = graph.parents[v]
        own = contents[v]
        if not ps:
            mapped[v] = {r.ck: r for r in own.values()}
            tparents[v] = ()
            continue
        if len(ps) == 1:
            keep = ps[0]
        else:
            cks = {r.ck for r in own.values()}
            keep = min(ps, key=lambda p: (-sum(1 for r in contents[p].values() if r.ck in cks), p))
        tparents[v] = (keep,)
        inherited = mapped[keep]
        m = {}
        for r in own.values():
            got = inherited.get(r.ck)
            if got is not None:
                m[r.ck] = got
            elif r.origin == v:
                m[r.ck] = r
            else:
                synth = CompositeKey(r.key, v)
                rename[synth] = r.ck
                m[r.ck] = Record(synth, r.payload)
        mapped[v] = m
    tree_contents = {v: {r.key: r for r in mapped[v].values()} for v in order}
    deltas = {}
    for v in order:
        if tparents[v]:
            p = tparents[v][0]
            deltas[(p, v)] = Delta.between(p, v, tree_contents[p], tree_contents[v])
    return VersionTree(graph.root, tuple(graph.root_records), tparents, deltas, rename_log=rename)
