"""Small hand-built datasets used by tests and demos.

Payloads are one byte per record so that a capacity of 2 bytes holds two
records.
"""
from __future__ import annotations

from typing import Dict, List, Tuple

from .model import CompositeKey, Delta, Record, VersionGraph


def K(i: int) -> bytes:
    return b"K%d" % i


def rec(key: int, origin: int, payload: bytes = None) -> Record:
    return Record(CompositeKey(K(key), origin), payload if payload is not None else bytes([(key * 16 + origin) % 256]))


def ck(key: int, origin: int) -> CompositeKey:
    return CompositeKey(K(key), origin)


def _build(root_keys: List[int], edges: List[Tuple[int, int, Dict[str, list]]]) -> VersionGraph:
    g = VersionGraph(0, tuple(rec(k, 0) for k in root_keys))
    for parent, child, ch in edges:
        d = Delta(parent, child,
                  adds=tuple(rec(k, child) for k in ch.get("add", [])),
                  updates=tuple(rec(k, child) for k in ch.get("upd", [])),
                  deletes=tuple(ck(k, o) for k, o in ch.get("del", [])))
        g.add_version(child, [parent], [d])
    return g


def five_version_tree() -> VersionGraph:
    """V0 -> V1, V2; V1 -> V3 -> V4 over keys K0..K5.

    V0 = {K0V0, K1V0, K2V0, K3V0}
    V1 updates K3 and adds K4
    V2 updates K3, deletes K2 and adds K5
    V3 deletes K2
    V4 updates K3
    """
    return _build([0, 1, 2, 3], [
        (0, 1, {"upd": [3], "add": [4]}),
        (0, 2, {"upd": [3], "add": [5], "del": [(2, 0)]}),
        (1, 3, {"del": [(2, 0)]}),
        (3, 4, {"upd": [3]}),
    ])


# Two hand partitionings of the five-version tree into 2-record chunks.
PARTITION_KEY_ORDER = [
    [ck(0, 0), ck(1, 0)],
    [ck(2, 0), ck(3, 0)],
    [ck(3, 1), ck(3, 2)],
    [ck(4, 1), ck(5, 2)],
    [ck(3, 4)],
]
PARTITION_VERSION_AWARE = [
    [ck(0, 0), ck(1, 0)],
    [ck(2, 0), ck(3, 0)],
    [ck(3, 1), ck(4, 1)],
    [ck(3, 2), ck(5, 2)],
    [ck(3, 4)],
]


def seven_version_tree() -> VersionGraph:
    """V0 -> V1; V1 -> V2, V3; V2 -> V4, V5; V3 -> V6.

    Every version after V0 updates records of the keys listed; V3 and V5
    also add K4 and K5.
    """
    return _build([0, 1, 2, 3], [
        (0, 1, {"upd": [0, 2]}),
        (1, 2, {"upd": [0, 3]}),
        (1, 3, {"upd": [1, 2], "add": [4]}),
        (2, 4, {"upd": [0, 3]}),
        (2, 5, {"upd": [1, 3], "add": [5]}),
        (3, 6, {"upd": [2]}),
    ])


def four_version_tree() -> VersionGraph:
    """V0 holds four records; V1 and V2 derive from V0, V3 from V1; each
    child adds two records."""
    return _build([0, 1, 2, 3], [
        (0, 1, {"add": [4, 5]}),
        (0, 2, {"add": [6, 7]}),
        (1, 3, {"add": [8, 9]}),
    ])


def merge_graph() -> VersionGraph:
    """V8 merges V5, V6 and V7, which each changed different keys of V4."""
    g = _build([0, 1, 2, 3], [
        (0, 1, {"upd": [0]}),
        (1, 2, {"add": [4]}),
        (2, 3, {"upd": [1]}),
        (3, 4, {"upd": [2]}),
        (4, 5, {"upd": [0], "add": [5]}),
        (4, 6, {"upd": [3]}),
        (4, 7, {"add": [6]}),
    ])
    from .model import materialize_all
    c = materialize_all(g)
    merged = dict(c[5])
    merged[K(3)] = c[6][K(3)]
    merged[K(6)] = c[7][K(6)]
    merged[K(7)] = rec(7, 8)
    g.add_version(8, [5, 6, 7], [Delta.between(p, 8, c[p], merged) for p in (5, 6, 7)])
    return g
