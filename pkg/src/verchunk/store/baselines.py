"""Baseline engines with the chunked engine's query semantics.

DeltaBaseline     per-version keyed delta frames cut into capacity-sized
                  pieces under ``B:``; a version is rebuilt by replaying
                  its chain, a single key by bisecting each frame.
SubChunkBaseline  one compressed group per primary key under ``S:``, with
                  the group's version membership in the same frame.
SingleAddress     every record under its own composite key (``R:``), plus
                  an in-memory version -> key -> origin index.
"""
from __future__ import annotations

import json
import math
import struct
from typing import Dict, List, Optional, Set, Tuple

from ..deltalog import KeyedDelta, LogFormatError, encode_keyed
from ..model import (CompositeKey, Content, Delta, PrimaryKey, Record, VersionGraph, VersionId,
                     apply_to_content, iter_contents)
from ..storage import INDEX_NS, SealedChunk, deserialize_chunk, serialize_chunk
from ..subchunk import SubChunk
from .base import Engine, StoreError, UnknownVersion, check_range, dump_json, hexkeys, unhexkeys


def _u64(v: int) -> bytes:
    return v.to_bytes(8, "big")


class DeltaBaseline(Engine):
    kind = "delta"
    NS = b"B:"

    def __init__(self, backend, cfg=None):
        super().__init__(backend, cfg)
        self._pieces: Dict[VersionId, int] = {}
        meta = self._read_meta()
        if meta is not None:
            self._load_structure(meta)
            self._pieces = {int(v): n for v, n in meta["pieces"].items()}

    def _piece_keys(self, v: VersionId) -> List[bytes]:
        return [self.NS + _u64(v) + i.to_bytes(4, "big") for i in range(self._pieces[v])]

    def _store(self, v: VersionId, parents: Tuple[VersionId, ...], d: Delta) -> None:
        data = encode_keyed(v, parents, d)
        cap = self.cfg.capacity
        n = max(1, math.ceil(len(data) / cap))
        for i in range(n):
            self.backend.put(self.NS + _u64(v) + i.to_bytes(4, "big"), data[i * cap:(i + 1) * cap])
        self._pieces[v] = n

    def _save(self) -> None:
        self._save_meta({"pieces": {str(v): n for v, n in self._pieces.items()}})

    def load(self, graph: VersionGraph) -> None:
        with self._write_lock:
            self._set_structure(graph)
            for v in self.versions:
                ps = self._parents[v]
                if ps:
                    d = graph.delta(ps[0], v)
                else:
                    d = Delta(None, v, adds=tuple(sorted(graph.root_records, key=lambda r: r.key)))
                self._store(v, ps, d)
            self._save()

    def _ingest(self, vid, parent, d):
        self._store(vid, (parent,), d)
        self._add_version(vid, parent)
        self._save()

    def _chain(self, v: VersionId) -> List[VersionId]:
        self._check(v)
        path = [v]
        while self._parents[path[-1]]:
            path.append(self._parents[path[-1]][0])
        path.reverse()
        return path

    def _deltas(self, vs: List[VersionId]) -> Dict[VersionId, KeyedDelta]:
        keys = [k for v in vs for k in self._piece_keys(v)]
        got = self.backend.multi_get(keys, self.cfg.parallelism)
        out = {}
        for v in vs:
            parts = [got[k] for k in self._piece_keys(v)]
            if any(p is None for p in parts):
                raise StoreError(f"delta pieces of V{v} are missing")
            try:
                out[v] = KeyedDelta(b"".join(parts))
            except LogFormatError as e:
                raise StoreError(f"delta of V{v}: {e}") from None
        return out

    def get_version(self, v):
        path = self._chain(v)
        ds = self._deltas(path)
        content: Content = {}
        for u in path:
            content = apply_to_content(content, ds[u].delta())
        return set(content.values())

    def get_range(self, v, low, high):
        check_range(low, high)
        return {r for r in self.get_version(v) if low <= r.key <= high}

    def get_record(self, v, key):
        # walk back until some delta on the chain wrote or deleted the key
        for u in reversed(self._chain(v)):
            touched, r = self._deltas([u])[u].lookup(key)
            if touched:
                return r
        return None

    def get_evolution(self, key):
        # every delta is fetched and replayed in order, following one key only
        order = self.versions
        ds = self._deltas(order)
        held: Dict[VersionId, Optional[Record]] = {}
        ev: Dict[CompositeKey, Tuple[Record, Set[VersionId]]] = {}
        for v in order:
            ps = self._parents[v]
            touched, r = ds[v].lookup(key)
            if not touched:
                r = held[ps[0]] if ps else None
            held[v] = r
            if r is not None:
                ev.setdefault(r.ck, (r, set()))[1].add(v)
        return self._evolution_order(ev)


class SubChunkBaseline(Engine):
    kind = "subchunk"
    NS = b"S:"

    def __init__(self, backend, cfg=None):
        super().__init__(backend, cfg)
        self._keys: Dict[PrimaryKey, int] = {}      # key -> frame id
        meta = self._read_meta()
        if meta is not None:
            self._load_structure(meta)
            self._keys = unhexkeys(meta["keys"])

    def _save(self):
        self._save_meta({"keys": hexkeys(self._keys)})

    def _frame_key(self, key: PrimaryKey) -> bytes:
        return self.NS + key

    def _put_group(self, key: PrimaryKey, members: List[Record], parents: List[int],
                   cmap: Dict[VersionId, List[CompositeKey]]) -> None:
        if key not in self._keys:
            self._keys[key] = len(self._keys)
        sc = SubChunk.build(members, parents, members[0].ck)
        self.backend.put(self._frame_key(key), serialize_chunk(SealedChunk(self._keys[key], [sc], cmap)))

    def load(self, graph):
        with self._write_lock:
            self._set_structure(graph)
            groups: Dict[PrimaryKey, Dict[CompositeKey, Tuple[Record, Optional[CompositeKey]]]] = {}
            cmaps: Dict[PrimaryKey, Dict[VersionId, List[CompositeKey]]] = {}
            kept: Dict[VersionId, Content] = {}
            left = {v: len(graph.children(v)) for v in graph.versions}
            for v, content in iter_contents(graph):
                p = graph.parent(v)
                for key, r in content.items():
                    g = groups.setdefault(key, {})
                    if r.ck not in g:
                        prev = kept[p].get(key) if p is not None else None
                        g[r.ck] = (r, prev.ck if prev is not None else None)
                    cmaps.setdefault(key, {})[v] = [r.ck]
                kept[v] = content
                if p is not None:
                    left[p] -= 1
                    if not left[p]:
                        del kept[p]
            for key in sorted(groups):
                g = groups[key]
                order = sorted(g, key=lambda c: (self._pos[c.origin], c.origin))
                idx = {c: i for i, c in enumerate(order)}
                parents = [idx.get(g[c][1], 0) if idx.get(g[c][1], i) < i else 0 for i, c in enumerate(order)]
                self._put_group(key, [g[c][0] for c in order], parents, cmaps[key])
            self._save()

    def _groups(self, keys: List[PrimaryKey]) -> Dict[PrimaryKey, SealedChunk]:
        got = self.backend.multi_get([self._frame_key(k) for k in keys], self.cfg.parallelism)
        return {k: deserialize_chunk(got[self._frame_key(k)]) for k in keys}

    def _ingest(self, vid, parent, d):
        frames = self._groups(sorted(self._keys))
        written = {r.key: r for r in d.plus}
        gone = {c.key for c in d.deletes}
        for key, ch in frames.items():
            sc = ch.items[0]
            cmap = {v: list(cs) for v, cs in ch.chunk_map.items()}
            cur = cmap.get(parent)
            members, parents = list(sc.members), list(sc.parents)
            if key in written:
                r = written[key]
                at = [m.ck for m in members].index(cur[0]) if cur else 0
                members.append(r)
                parents.append(at)
                cmap[vid] = [r.ck]
            elif cur and key not in gone:
                cmap[vid] = list(cur)
            else:
                continue
            self._put_group(key, members, parents, cmap)
        for key, r in written.items():
            if key not in frames:
                self._put_group(key, [r], [0], {vid: [r.ck]})
        self._add_version(vid, parent)
        self._save()

    def _collect(self, v, keys) -> Set[Record]:
        self._check(v)
        out = set()
        for ch in self._groups(keys).values():
            out.update(ch.records_for(v))
        return out

    def get_version(self, v):
        return self._collect(v, sorted(self._keys))

    def get_range(self, v, low, high):
        check_range(low, high)
        return self._collect(v, [k for k in sorted(self._keys) if low <= k <= high])

    def get_record(self, v, key):
        self._check(v)
        if key not in self._keys:
            return None
        got = self._collect(v, [key])
        return next(iter(got)) if got else None

    def get_evolution(self, key):
        if key not in self._keys:
            return []
        ch = self._groups([key])[key]
        recs = {m.ck: m for m in ch.all_records()}
        ev: Dict[CompositeKey, Tuple[Record, Set[VersionId]]] = {}
        for v, cks in ch.chunk_map.items():
            for c in cks:
                ev.setdefault(c, (recs[c], set()))[1].add(v)
        return self._evolution_order(ev)


_RK = struct.Struct(">H")


class SingleAddress(Engine):
    kind = "single"
    NS = b"R:"

    def __init__(self, backend, cfg=None):
        super().__init__(backend, cfg)
        self._index: Dict[VersionId, Dict[PrimaryKey, VersionId]] = {}
        meta = self._read_meta()
        if meta is not None:
            self._load_structure(meta)
            for v in self.versions:
                raw = self.backend.get(self._index_key(v))
                self._index[v] = {k: o for k, o in unhexkeys(json.loads(raw)).items()}

    def _rec_key(self, ck: CompositeKey) -> bytes:
        return self.NS + _RK.pack(len(ck.key)) + ck.key + _u64(ck.origin)

    @staticmethod
    def _index_key(v: VersionId) -> bytes:
        return INDEX_NS + b"single/" + _u64(v)

    def _put_index(self, v):
        self.backend.put(self._index_key(v), dump_json(hexkeys(self._index[v])))

    def load(self, graph):
        with self._write_lock:
            self._set_structure(graph)
            stored = set()
            for v, content in iter_contents(graph):
                for r in content.values():
                    if r.ck not in stored:
                        self.backend.put(self._rec_key(r.ck), r.payload)
                        stored.add(r.ck)
                self._index[v] = {k: r.origin for k, r in content.items()}
                self._put_index(v)
            self._save_meta({})

    def _content_cks(self, v):
        self._check(v)
        return {k: CompositeKey(k, o) for k, o in self._index[v].items()}

    def _ingest(self, vid, parent, d):
        idx = dict(self._index[parent])
        for c in d.deletes:
            del idx[c.key]
        for r in d.plus:
            self.backend.put(self._rec_key(r.ck), r.payload)
            idx[r.key] = r.origin
        self._index[vid] = idx
        self._put_index(vid)
        self._add_version(vid, parent)
        self._save_meta({})

    def _fetch(self, cks: List[CompositeKey]) -> List[Record]:
        got = self.backend.multi_get([self._rec_key(c) for c in cks], self.cfg.parallelism)
        out = []
        for c in cks:
            payload = got[self._rec_key(c)]
            if payload is None:
                raise StoreError(f"record {c!r} is missing")
            out.append(Record(c, payload))
        return out

    def _lookup(self, v) -> Dict[PrimaryKey, VersionId]:
        try:
            return self._index[v]
        except KeyError:
            raise UnknownVersion(v) from None

    def get_version(self, v):
        idx = self._lookup(v)
        return set(self._fetch([CompositeKey(k, o) for k, o in sorted(idx.items())]))

    def get_range(self, v, low, high):
        check_range(low, high)
        idx = self._lookup(v)
        return set(self._fetch([CompositeKey(k, o) for k, o in sorted(idx.items()) if low <= k <= high]))

    def get_record(self, v, key):
        o = self._lookup(v).get(key)
        return None if o is None else self._fetch([CompositeKey(key, o)])[0]

    def get_evolution(self, key):
        members: Dict[CompositeKey, Set[VersionId]] = {}
        for v, idx in self._index.items():
            o = idx.get(key)
            if o is not None:
                members.setdefault(CompositeKey(key, o), set()).add(v)
        cks = sorted(members, key=lambda c: c.origin)
        ev = {r.ck: (r, members[r.ck]) for r in self._fetch(cks)}
        return self._evolution_order(ev)
