"""Query interface shared by the chunked engine and the baselines."""
from __future__ import annotations

import json
import threading
from abc import ABC, abstractmethod
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Tuple

from ..model import CompositeKey, Delta, DeltaError, PrimaryKey, Record, VersionGraph, VersionId
from ..storage import KvBackend, index_key
from .config import EngineConfig

Evolution = List[Tuple[Record, FrozenSet[VersionId]]]


class StoreError(Exception):
    pass


class UnknownVersion(StoreError, KeyError):
    pass


class InconsistentDelta(StoreError, ValueError):
    pass


def hexkeys(d: Mapping[bytes, object]) -> Dict[str, object]:
    return {k.hex(): v for k, v in d.items()}


def unhexkeys(d: Mapping[str, object]) -> Dict[bytes, object]:
    return {bytes.fromhex(k): v for k, v in d.items()}


def dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


class Engine(ABC):
    """Version structure plus the five operations. Subclasses implement the
    storage layout; version ids are assigned here."""

    kind = "abstract"

    def __init__(self, backend: KvBackend, cfg: Optional[EngineConfig] = None):
        self.backend = backend
        self.cfg = cfg or EngineConfig()
        self._parents: Dict[VersionId, Tuple[VersionId, ...]] = {}
        self._pos: Dict[VersionId, int] = {}
        self._root: Optional[VersionId] = None
        self._write_lock = threading.Lock()

    # -------------------------------------------------------- structure

    @property
    def versions(self) -> List[VersionId]:
        return sorted(self._parents, key=self._pos.__getitem__)

    @property
    def root(self) -> Optional[VersionId]:
        return self._root

    def parents(self, v: VersionId) -> Tuple[VersionId, ...]:
        self._check(v)
        return self._parents[v]

    def _check(self, v: VersionId) -> None:
        if v not in self._parents:
            raise UnknownVersion(v)

    def _next_vid(self) -> VersionId:
        return max(self._parents, default=-1) + 1

    def _set_structure(self, graph: VersionGraph) -> None:
        if self._parents:
            raise StoreError("store already holds data")
        graph.validate()
        self._root = graph.root
        for i, v in enumerate(graph.topo_order()):
            self._parents[v] = tuple(graph.parents[v])
            self._pos[v] = i

    def _add_version(self, v: VersionId, parent: VersionId) -> None:
        self._parents[v] = (parent,)
        self._pos[v] = len(self._pos)

    def _structure_blob(self) -> dict:
        return {"root": self._root,
                "versions": [[v, list(self._parents[v])] for v in self.versions]}

    def _load_structure(self, blob: dict) -> None:
        self._root = blob["root"]
        self._parents = {}
        self._pos = {}
        for i, (v, ps) in enumerate(blob["versions"]):
            self._parents[v] = tuple(ps)
            self._pos[v] = i

    def _evolution_order(self, ev: Dict[CompositeKey, Tuple[Record, Set[VersionId]]]) -> Evolution:
        items = sorted(ev.values(), key=lambda rv: (self._pos.get(rv[0].origin, -1), rv[0].origin))
        return [(r, frozenset(vs)) for r, vs in items]

    # -------------------------------------------------------- ingest

    @abstractmethod
    def load(self, graph: VersionGraph) -> None:
        """Offline ingest of a whole version graph into an empty store."""

    def commit(self, parent: VersionId, delta: Optional[Delta] = None, *,
               upserts: Optional[Mapping[PrimaryKey, bytes]] = None,
               deletes: Iterable[PrimaryKey] = ()) -> VersionId:
        """Derive a new version from ``parent``.

        Changes come either as a Delta (its child id is replaced by the
        assigned one) or as key -> payload upserts plus deleted keys.
        """
        with self._write_lock:
            self._check(parent)
            vid = self._next_vid()
            d = self._prepare(parent, vid, delta, upserts, deletes)
            self._ingest(vid, parent, d)
            return vid

    def _prepare(self, parent, vid, delta, upserts, deletes) -> Delta:
        cur = self._content_cks(parent)
        if delta is not None:
            if upserts or deletes:
                raise InconsistentDelta("pass a Delta or upserts/deletes, not both")
            if delta.imports:
                raise InconsistentDelta("merge imports are only accepted by load()")
            adds = [Record(CompositeKey(r.key, vid), r.payload) for r in delta.adds]
            updates = [Record(CompositeKey(r.key, vid), r.payload) for r in delta.updates]
            dels = list(delta.deletes)
            for r in adds:
                if r.key in cur:
                    raise InconsistentDelta(f"add of existing key {r.key!r}")
            for r in updates:
                if r.key not in cur:
                    raise InconsistentDelta(f"update of missing key {r.key!r}")
            for c in dels:
                if cur.get(c.key) != c:
                    raise InconsistentDelta(f"delete of {c!r} which V{parent} does not hold")
        else:
            adds, updates, dels = [], [], []
            for key, payload in sorted((upserts or {}).items()):
                r = Record(CompositeKey(key, vid), bytes(payload))
                (updates if key in cur else adds).append(r)
            for key in sorted(set(deletes)):
                if key not in cur:
                    raise InconsistentDelta(f"delete of missing key {key!r}")
                dels.append(cur[key])
        try:
            return Delta(parent, vid, tuple(adds), tuple(updates), tuple(dels))
        except DeltaError as e:
            raise InconsistentDelta(str(e)) from None

    def _content_cks(self, v: VersionId) -> Dict[PrimaryKey, CompositeKey]:
        """Primary key -> composite key of version v (original naming)."""
        return {r.key: r.ck for r in self.get_version(v)}

    @abstractmethod
    def _ingest(self, vid: VersionId, parent: VersionId, d: Delta) -> None:
        ...

    # -------------------------------------------------------- queries

    @abstractmethod
    def get_version(self, v: VersionId) -> Set[Record]:
        ...

    @abstractmethod
    def get_range(self, v: VersionId, low: PrimaryKey, high: PrimaryKey) -> Set[Record]:
        ...

    @abstractmethod
    def get_record(self, v: VersionId, key: PrimaryKey) -> Optional[Record]:
        ...

    @abstractmethod
    def get_evolution(self, key: PrimaryKey) -> Evolution:
        ...

    def close(self) -> None:
        self.backend.close()

    # shared persistence of the structure for the baselines
    def _save_meta(self, extra: dict) -> None:
        blob = self._structure_blob()
        blob.update(extra)
        self.backend.put(index_key(f"{self.kind}-meta"), dump_json(blob))

    def _read_meta(self) -> Optional[dict]:
        raw = self.backend.get(index_key(f"{self.kind}-meta"))
        return None if raw is None else json.loads(raw)


def check_range(low: PrimaryKey, high: PrimaryKey) -> None:
    if low > high:
        raise StoreError(f"empty key range {low!r} > {high!r}")
