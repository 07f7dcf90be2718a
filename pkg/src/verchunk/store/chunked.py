"""The chunked engine: partitioned chunks, two projection indexes, and a
delta store drained by batched compaction.

Backend keys:
    C:<id>        chunk frames (items plus their chunk map)
    D:<version>   committed deltas awaiting compaction
    I:manifest    commit point: structure, per-chunk item counts, renames
    I:v2c, I:k2c  the version -> chunks and key -> chunks projections

A compaction writes chunks, then projections, then the manifest. A crash
before the manifest leaves frames that may carry items or versions the
manifest does not know; those are trimmed when the store is reopened and
the pending deltas (still under ``D:``) are compacted again.
"""
from __future__ import annotations

import bisect
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Tuple, Union

from ..deltalog import decode_delta, encode_delta
from ..model import (CompositeKey, Content, Delta, PrimaryKey, Record, VersionGraph, VersionId,
                     apply_to_content, dag_to_tree, iter_contents)
from ..partition import VIRTUAL_ROOT, PartitionConfig, partition
from ..storage import DELTA_NS, SealedChunk, delta_key, get_chunk, index_key, multi_get_chunks, put_chunk
from ..pipeline import make_items
from ..subchunk import SubChunk
from .base import Engine, Evolution, StoreError, check_range, dump_json, hexkeys, unhexkeys

log = logging.getLogger(__name__)

ItemObj = Union[Record, SubChunk]
EMPTY: FrozenSet[int] = frozenset()


@dataclass(frozen=True)
class IndexSet:
    """The two lossy projections. Sound: a chunk holding a record of v with
    key K is listed under both v and K."""
    version_to_chunks: Mapping[VersionId, FrozenSet[int]]
    key_to_chunks: Mapping[PrimaryKey, FrozenSet[int]]
    sorted_keys: Tuple[PrimaryKey, ...] = ()

    def chunks_for_range(self, low: PrimaryKey, high: PrimaryKey) -> Set[int]:
        lo = bisect.bisect_left(self.sorted_keys, low)
        hi = bisect.bisect_right(self.sorted_keys, high)
        out: Set[int] = set()
        for k in self.sorted_keys[lo:hi]:
            out |= self.key_to_chunks[k]
        return out


@dataclass(frozen=True)
class _State:
    """What a query sees; replaced as a whole, never mutated."""
    index: IndexSet
    compacted: FrozenSet[VersionId]
    pending: Mapping[VersionId, Delta]
    rename: Mapping[CompositeKey, CompositeKey]
    epoch: int = 0


@dataclass
class DeltaStore:
    """Committed deltas not yet placed in chunks, persisted under ``D:``."""
    batch_size: int
    pending: Dict[VersionId, Delta] = field(default_factory=dict)

    @property
    def delta_chain(self) -> Dict[VersionId, VersionId]:
        return {v: d.parent for v, d in self.pending.items()}

    def chain(self, v: VersionId) -> Tuple[VersionId, List[Delta]]:
        """Nearest compacted ancestor of v and the deltas leading to v."""
        ds = []
        while v in self.pending:
            d = self.pending[v]
            ds.append(d)
            v = d.parent
        ds.reverse()
        return v, ds

    def full(self) -> bool:
        return len(self.pending) >= self.batch_size


@dataclass
class CompactionStats:
    versions: int = 0
    new_records: int = 0
    chunks_created: int = 0
    chunks_rewritten: int = 0
    items_appended: int = 0
    chunk_map_writes: int = 0
    index_writes: int = 0


@dataclass
class _ChunkMeta:
    items: List[Tuple[CompositeKey, ...]]        # member keys per item, tree naming
    sizes: List[int]
    cmap: Dict[VersionId, Set[CompositeKey]]

    @property
    def byte_size(self) -> int:
        return sum(self.sizes)


def _item_cks(obj: ItemObj) -> Tuple[CompositeKey, ...]:
    return (obj.ck,) if isinstance(obj, Record) else obj.cks


def _item_size(obj: ItemObj) -> int:
    return obj.size


class ChunkedStore(Engine):
    kind = "chunked"

    def __init__(self, backend, cfg=None):
        super().__init__(backend, cfg)
        self.deltas = DeltaStore(self.cfg.batch_size)
        self._state = _State(IndexSet({}, {}), frozenset(), {}, {})
        self._layout: Optional[Dict[int, _ChunkMeta]] = None
        self._where: Dict[CompositeKey, int] = {}
        self._counts: Dict[int, int] = {}
        self._next_cid = 0
        self.compactions = 0
        self.last_compaction: Optional[CompactionStats] = None
        self._open()

    @property
    def partition_config(self) -> PartitionConfig:
        c = self.cfg
        return PartitionConfig(capacity=c.capacity, slack=c.slack, shingles=c.shingles, beta=c.beta,
                               algorithm=c.algorithm, exact_multichild=c.exact_multichild, seed=c.seed)

    @property
    def index(self) -> IndexSet:
        return self._state.index

    @property
    def pending(self) -> List[VersionId]:
        return sorted(self._state.pending, key=self._pos.__getitem__)

    def span(self, v: VersionId) -> int:
        return len(self._state.index.version_to_chunks.get(v, EMPTY))

    def total_span(self) -> int:
        return sum(len(s) for s in self._state.index.version_to_chunks.values())

    def chunk_ids(self) -> List[int]:
        return sorted(self._counts)

    # -------------------------------------------------------------- open

    def _open(self) -> None:
        raw = self.backend.get(index_key("manifest"))
        if raw is None:
            return
        man = json.loads(raw)
        self._load_structure(man)
        self._counts = {int(c): n for c, n in man["counts"].items()}
        self._next_cid = man["next_cid"]
        epoch = man["epoch"]
        rename = {CompositeKey(bytes.fromhex(k), t): CompositeKey(bytes.fromhex(k), o)
                  for k, t, o in man["rename"]}
        compacted = frozenset(self._parents)
        index = self._read_index(epoch)
        if index is None:
            log.info("projections behind manifest epoch %d; rebuilding from chunks", epoch)
            self._ensure_layout(compacted)
            index = self._index_from_layout()
        pending: Dict[VersionId, Delta] = {}
        for key in self.backend.keys(DELTA_NS):
            v, ps, d = decode_delta(self.backend.get(key))
            if v in compacted:
                self.backend.delete(key)        # compacted before a crash, not yet cleaned
                continue
            pending[v] = d
        for v in sorted(pending):
            self._add_version(v, pending[v].parent)
        self.deltas.pending = pending
        self._state = _State(index, compacted, dict(pending), rename, epoch)

    def _read_index(self, epoch: int) -> Optional[IndexSet]:
        rv, rk = self.backend.get(index_key("v2c")), self.backend.get(index_key("k2c"))
        if rv is None or rk is None:
            return None
        bv, bk = json.loads(rv), json.loads(rk)
        if bv["epoch"] != epoch or bk["epoch"] != epoch:
            return None
        v2c = {int(v): frozenset(cs) for v, cs in bv["map"].items()}
        k2c = {k: frozenset(cs) for k, cs in unhexkeys(bk["map"]).items()}
        return IndexSet(v2c, k2c, tuple(sorted(k2c)))

    def _ensure_layout(self, compacted: Optional[FrozenSet[VersionId]] = None) -> None:
        """Rebuild per-chunk metadata from the frames, dropping items and
        versions the manifest does not know about."""
        if self._layout is not None:
            return
        if compacted is None:
            compacted = self._state.compacted
        layout: Dict[int, _ChunkMeta] = {}
        for cid in sorted(self._counts):
            ch = get_chunk(self.backend, cid)
            keep = ch.items[:self._counts[cid]]
            meta = _ChunkMeta([_item_cks(x) for x in keep], [_item_size(x) for x in keep], {})
            held = {c for cks in meta.items for c in cks}
            for v, cks in ch.chunk_map.items():
                if v in compacted:
                    meta.cmap[v] = {c for c in cks if c in held}
            layout[cid] = meta
        self._layout = layout
        self._where = {c: cid for cid, m in layout.items() for cks in m.items for c in cks}

    def _index_from_layout(self) -> IndexSet:
        v2c: Dict[VersionId, Set[int]] = {}
        k2c: Dict[PrimaryKey, Set[int]] = {}
        for cid, m in self._layout.items():
            for v, cks in m.cmap.items():
                if cks:
                    v2c.setdefault(v, set()).add(cid)
            for cks in m.items:
                for c in cks:
                    k2c.setdefault(c.key, set()).add(cid)
        return IndexSet({v: frozenset(s) for v, s in v2c.items()},
                        {k: frozenset(s) for k, s in k2c.items()}, tuple(sorted(k2c)))

    # -------------------------------------------------------------- load

    def load(self, graph: VersionGraph) -> None:
        with self._write_lock:
            if self._counts or self._parents:
                raise StoreError("load() needs an empty store")
            self._set_structure(graph)
            tree = dag_to_tree(graph)
            contents: Dict[VersionId, Dict[PrimaryKey, CompositeKey]] = {}
            records: Dict[CompositeKey, Record] = {}
            for v, content in iter_contents(tree):
                contents[v] = {key: r.ck for key, r in content.items()}
                for r in content.values():
                    records.setdefault(r.ck, r)
            parent = {v: tree.parent(v) for v in tree.versions}
            children = {v: list(tree.children(v)) for v in tree.versions}
            it, item_of, objs = make_items(tree.root, parent, children, contents, records, self.cfg.k)
            p = partition(it, self.partition_config)
            self.partition_stats = dict(p.stats)
            self._layout, self._where = {}, {}
            groups = [list(c.items) for c in p.chunks]
            placed = self._place_new(groups, objs)
            maps = self._maps_for(contents, item_of, placed)
            for cid, items in placed.items():
                self._write_new_chunk(cid, [objs[i] for i in items], maps.get(cid, {}))
            stats = CompactionStats(versions=len(contents), new_records=len(records), chunks_created=len(placed),
                                    chunk_map_writes=len(placed))
            rename = dict(tree.rename_log)
            index = self._index_from_layout()
            self._commit_point(index, frozenset(self._parents), rename, 1, stats)
            self.last_compaction = stats

    def _place_new(self, groups: List[List[CompositeKey]], objs) -> Dict[int, List[CompositeKey]]:
        placed = {}
        for g in groups:
            cid = self._next_cid
            self._next_cid += 1
            placed[cid] = list(g)
            self._layout[cid] = _ChunkMeta([], [], {})
            self._append(cid, g, objs)
        return placed

    def _append(self, cid: int, item_ids: Iterable[CompositeKey], objs) -> None:
        meta = self._layout[cid]
        for i in item_ids:
            cks = _item_cks(objs[i])
            meta.items.append(cks)
            meta.sizes.append(_item_size(objs[i]))
            for c in cks:
                self._where[c] = cid
        self._counts[cid] = len(meta.items)

    def _maps_for(self, contents, item_of, placed) -> Dict[int, Dict[VersionId, List[CompositeKey]]]:
        """Chunk-map entries for the given versions; also records them in the layout."""
        maps: Dict[int, Dict[VersionId, List[CompositeKey]]] = {}
        for v in sorted(contents):
            for c in contents[v].values():
                cid = self._where[c]
                maps.setdefault(cid, {}).setdefault(v, []).append(c)
        for cid, vm in maps.items():
            cmap = self._layout[cid].cmap
            for v, cks in vm.items():
                cmap[v] = set(cks)
        return maps

    def _write_new_chunk(self, cid: int, items: List[ItemObj], cmap) -> None:
        put_chunk(self.backend, SealedChunk(cid, items, {v: sorted(cks) for v, cks in cmap.items()}))

    def _commit_point(self, index: IndexSet, compacted, rename, epoch: int, stats: CompactionStats) -> None:
        """Persist projections then the manifest; swap the visible state."""
        v2c = {str(v): sorted(cs) for v, cs in index.version_to_chunks.items()}
        k2c = hexkeys({k: sorted(cs) for k, cs in index.key_to_chunks.items()})
        self.backend.put(index_key("v2c"), dump_json({"epoch": epoch, "map": v2c}))
        self.backend.put(index_key("k2c"), dump_json({"epoch": epoch, "map": k2c}))
        man = {"root": self._root,
               "versions": [[v, list(self._parents[v])] for v in self.versions if v in compacted],
               "counts": {str(c): n for c, n in sorted(self._counts.items())},
               "next_cid": self._next_cid, "epoch": epoch,
               "rename": sorted([t.key.hex(), t.origin, o.origin] for t, o in rename.items()),
               "algorithm": self.cfg.algorithm, "k": self.cfg.k}
        self.backend.put(index_key("manifest"), dump_json(man))
        stats.index_writes = 3
        pending = {v: d for v, d in self._state.pending.items() if v not in compacted}
        self._state = _State(index, frozenset(compacted), pending, rename, epoch)

    # -------------------------------------------------------------- ingest

    def _ingest(self, vid: VersionId, parent: VersionId, d: Delta) -> None:
        self.backend.put(delta_key(vid), encode_delta(vid, (parent,), d))
        self._add_version(vid, parent)
        self.deltas.pending[vid] = d
        st = self._state
        pending = dict(st.pending)
        pending[vid] = d
        self._state = _State(st.index, st.compacted, pending, st.rename, st.epoch)
        if self.deltas.full():
            self.compact()

    def _content_cks(self, v: VersionId) -> Dict[PrimaryKey, CompositeKey]:
        self._check(v)
        st = self._state
        base, chain = self.deltas.chain(v)
        self._ensure_layout()
        out = {}
        for cid in st.index.version_to_chunks.get(base, EMPTY):
            for c in self._layout[cid].cmap.get(base, ()):
                out[c.key] = st.rename.get(c, c)
        for d in chain:
            for c in d.deletes:
                del out[c.key]
            for r in d.plus:
                out[r.key] = r.ck
        return out

    def compact(self) -> Optional[CompactionStats]:
        """Place the records of all pending versions and publish them."""
        if not self.deltas.pending:
            return None
        self._ensure_layout()
        st = self._state
        batch = sorted(self.deltas.pending, key=self._pos.__getitem__)
        in_batch = set(batch)
        stats = CompactionStats(versions=len(batch))

        # contents of batch versions, tree naming (new records are never renamed)
        contents: Dict[VersionId, Dict[PrimaryKey, CompositeKey]] = {}
        records: Dict[CompositeKey, Record] = {}
        for v in batch:
            d = self.deltas.pending[v]
            if d.parent in in_batch:
                cur = dict(contents[d.parent])
            else:
                cur = {}
                for cid in st.index.version_to_chunks.get(d.parent, EMPTY):
                    for c in self._layout[cid].cmap.get(d.parent, ()):
                        cur[c.key] = c
            for c in d.deletes:
                del cur[c.key]
            for r in d.plus:
                cur[r.key] = r.ck
                records[r.ck] = r
            contents[v] = cur
        stats.new_records = len(records)

        # partition the batch's new records under a virtual root
        parent = {VIRTUAL_ROOT: None}
        children: Dict[VersionId, List[VersionId]] = {VIRTUAL_ROOT: []}
        for v in batch:
            p = self.deltas.pending[v].parent
            p = p if p in in_batch else VIRTUAL_ROOT
            parent[v] = p
            children[v] = []
            children[p].append(v)
        fresh = {VIRTUAL_ROOT: {}}
        for v in batch:
            fresh[v] = {key: c for key, c in contents[v].items() if c.origin in in_batch}
        objs: Dict[CompositeKey, ItemObj] = {}
        item_of: Dict[CompositeKey, CompositeKey] = {}
        groups: List[List[CompositeKey]] = []
        if records:
            it, item_of, objs = make_items(VIRTUAL_ROOT, parent, children, fresh, records, self.cfg.k)
            groups = [list(c.items) for c in partition(it, self.partition_config).chunks]

        # partial groups go into an underfull chunk the batch already reads
        cap, limit = self.cfg.capacity, self.cfg.capacity * (1 + self.cfg.slack)
        anchors: Dict[CompositeKey, Set[VersionId]] = {}
        for v in batch:
            a, _ = self.deltas.chain(v)
            for c in fresh[v].values():
                anchors.setdefault(item_of[c], set()).add(a)
        appended: Dict[int, List[CompositeKey]] = {}
        new_groups = []
        for g in groups:
            size = sum(_item_size(objs[i]) for i in g)
            target = None
            if size < cap:
                near: Set[int] = set()
                for a in set().union(*(anchors[i] for i in g)):
                    near |= st.index.version_to_chunks.get(a, EMPTY)
                best = None
                for cid in sorted(near):
                    have = self._layout[cid].byte_size
                    if have < cap and have + size <= limit and (best is None or have > best[0]):
                        best = (have, cid)
                target = best[1] if best else None
            if target is None:
                new_groups.append(g)
            else:
                appended.setdefault(target, []).extend(g)
                self._append(target, g, objs)
                stats.items_appended += len(g)
        placed = self._place_new(new_groups, objs)
        stats.chunks_created = len(placed)

        maps = self._maps_for(contents, item_of, placed)
        for cid, items in placed.items():
            self._write_new_chunk(cid, [objs[i] for i in items], maps.get(cid, {}))
        for cid in sorted(set(maps) - set(placed)):
            # existing chunk: splice in appended items and the rebuilt map
            old = get_chunk(self.backend, cid)
            meta = self._layout[cid]
            keep = old.items[:self._counts[cid] - len(appended.get(cid, ()))]
            items = keep + [objs[i] for i in appended.get(cid, ())]
            put_chunk(self.backend, SealedChunk(cid, items, {v: sorted(cs) for v, cs in meta.cmap.items()}))
            stats.chunks_rewritten += 1
        stats.chunk_map_writes = len(maps)

        # projections: copy-on-write over the published ones
        v2c = dict(st.index.version_to_chunks)
        k2c = dict(st.index.key_to_chunks)
        for v in batch:
            v2c[v] = frozenset(cid for cid, vm in maps.items() if v in vm)
        grew = False
        for cid in set(placed) | set(appended):
            for i in placed.get(cid) or appended[cid]:
                key = objs[i].key
                if key not in k2c:
                    grew = True
                    k2c[key] = frozenset([cid])
                elif cid not in k2c[key]:
                    k2c[key] = k2c[key] | {cid}
        keys = tuple(sorted(k2c)) if grew else st.index.sorted_keys
        index = IndexSet(v2c, k2c, keys)
        self._commit_point(index, st.compacted | in_batch, st.rename, st.epoch + 1, stats)

        for v in batch:
            self.backend.delete(delta_key(v))
            del self.deltas.pending[v]
        self.compactions += 1
        self.last_compaction = stats
        return stats

    # -------------------------------------------------------------- queries

    def _fetch(self, cids: Iterable[int]) -> List[SealedChunk]:
        return multi_get_chunks(self.backend, sorted(cids), self.cfg.parallelism)

    def _compacted_records(self, st: _State, v: VersionId, cids: Iterable[int],
                           keep=lambda key: True) -> List[Record]:
        out = []
        for ch in self._fetch(cids):
            for r in ch.records_for(v):
                if keep(r.key):
                    o = st.rename.get(r.ck)
                    out.append(r if o is None else Record(o, r.payload))
        return out

    def _replay(self, st: _State, v: VersionId) -> Content:
        chain = []
        while v in st.pending:
            d = st.pending[v]
            chain.append(d)
            v = d.parent
        content = {r.key: r for r in self._compacted_records(st, v, st.index.version_to_chunks.get(v, EMPTY))}
        for d in reversed(chain):
            content = apply_to_content(content, d)
        return content

    def get_version(self, v: VersionId) -> Set[Record]:
        st = self._state
        self._check(v)
        if v in st.pending:
            return set(self._replay(st, v).values())
        return set(self._compacted_records(st, v, st.index.version_to_chunks.get(v, EMPTY)))

    def get_range(self, v: VersionId, low: PrimaryKey, high: PrimaryKey) -> Set[Record]:
        check_range(low, high)
        st = self._state
        self._check(v)
        inside = lambda key: low <= key <= high
        if v in st.pending:
            return {r for r in self._replay(st, v).values() if inside(r.key)}
        cids = st.index.version_to_chunks.get(v, EMPTY) & st.index.chunks_for_range(low, high)
        return set(self._compacted_records(st, v, cids, inside))

    def get_record(self, v: VersionId, key: PrimaryKey) -> Optional[Record]:
        st = self._state
        self._check(v)
        if v in st.pending:
            return self._replay(st, v).get(key)
        cids = st.index.version_to_chunks.get(v, EMPTY) & st.index.key_to_chunks.get(key, EMPTY)
        got = self._compacted_records(st, v, cids, lambda k: k == key)
        return got[0] if got else None

    def get_evolution(self, key: PrimaryKey) -> Evolution:
        st = self._state
        ev: Dict[CompositeKey, Tuple[Record, Set[VersionId]]] = {}
        for ch in self._fetch(st.index.key_to_chunks.get(key, EMPTY)):
            held = {r.ck: r for r in ch.all_records() if r.key == key}
            for v, cks in ch.chunk_map.items():
                if v not in st.compacted:
                    continue
                for c in cks:
                    if c in held:
                        o = st.rename.get(c, c)
                        if o not in ev:
                            ev[o] = (Record(o, held[c].payload), set())
                        ev[o][1].add(v)
        # uncompacted versions: follow each delta chain to a compacted version
        at_compacted: Dict[VersionId, Optional[Record]] = {}
        for v in sorted(st.pending, key=self._pos.__getitem__):
            u, found = v, None
            while u in st.pending:
                d = st.pending[u]
                hit = next((r for r in d.plus if r.key == key), None)
                if hit is not None or any(c.key == key for c in d.deletes):
                    found = ("rec", hit)
                    break
                u = d.parent
            if found is None:
                if u not in at_compacted:
                    at_compacted[u] = self.get_record(u, key)
                r = at_compacted[u]
            else:
                r = found[1]
            if r is not None:
                ev.setdefault(r.ck, (r, set()))[1].add(v)
        return self._evolution_order(ev)
