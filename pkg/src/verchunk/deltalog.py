"""Delta log files: one frame per version.

Frame layout::

    V <child> <parents> <nAdd> <nUpd> <nDel>[ <nImp>]\\n
    A|U  u32 keyLen, key, u32 payloadLen, payload
    D    u32 keyLen, key, u64 origin
    M    u32 keyLen, key, u64 origin, u32 payloadLen, payload

``<parents>`` is ``-`` for the root and a comma-separated list for merges
(first entry is the parent the frame's delta is relative to). ``M`` entries
and the sixth count only appear in merge frames. Integers are little-endian.
"""
from __future__ import annotations

import bisect
import io
import struct
import zlib
from typing import BinaryIO, Iterator, List, Optional, Tuple

import numpy as np

from .model import CompositeKey, Delta, DeltaError, Record, VersionGraph, apply_to_content, as_content

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class LogFormatError(ValueError):
    pass


def _put_bytes(out: BinaryIO, b: bytes) -> None:
    out.write(_U32.pack(len(b)))
    out.write(b)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise LogFormatError("truncated delta log")
    return b


def _get_bytes(f: BinaryIO) -> bytes:
    (n,) = _U32.unpack(_read_exact(f, 4))
    return _read_exact(f, n)


def write_frame(out: BinaryIO, child: int, parents: Tuple[int, ...], d: Delta) -> None:
    ptxt = ",".join(str(p) for p in parents) if parents else "-"
    header = f"V {child} {ptxt} {len(d.adds)} {len(d.updates)} {len(d.deletes)}"
    if d.imports or len(parents) > 1:
        header += f" {len(d.imports)}"
    out.write(header.encode("ascii") + b"\n")
    for tag, recs in ((b"A", d.adds), (b"U", d.updates)):
        for r in recs:
            out.write(tag)
            _put_bytes(out, r.key)
            _put_bytes(out, r.payload)
    for ck in d.deletes:
        out.write(b"D")
        _put_bytes(out, ck.key)
        out.write(_U64.pack(ck.origin))
    for r in d.imports:
        out.write(b"M")
        _put_bytes(out, r.key)
        out.write(_U64.pack(r.origin))
        _put_bytes(out, r.payload)


def read_frames(f: BinaryIO) -> Iterator[Tuple[int, Tuple[int, ...], Delta]]:
    while True:
        line = f.readline()
        if not line:
            return
        parts = line.decode("ascii", "replace").split()
        if len(parts) not in (6, 7) or parts[0] != "V":
            raise LogFormatError(f"bad frame header {line[:60]!r}")
        try:
            child = int(parts[1])
            parents = () if parts[2] == "-" else tuple(int(p) for p in parts[2].split(","))
            n_add, n_upd, n_del = (int(x) for x in parts[3:6])
            n_imp = int(parts[6]) if len(parts) == 7 else 0
        except ValueError:
            raise LogFormatError(f"bad frame header {line[:60]!r}") from None
        adds, upds, dels, imps = [], [], [], []
        for tag, n, sink in ((b"A", n_add, adds), (b"U", n_upd, upds)):
            for _ in range(n):
                if _read_exact(f, 1) != tag:
                    raise LogFormatError(f"expected {tag!r} entry in frame of V{child}")
                key = _get_bytes(f)
                sink.append(Record(CompositeKey(key, child), _get_bytes(f)))
        for _ in range(n_del):
            if _read_exact(f, 1) != b"D":
                raise LogFormatError(f"expected D entry in frame of V{child}")
            key = _get_bytes(f)
            (origin,) = _U64.unpack(_read_exact(f, 8))
            dels.append(CompositeKey(key, origin))
        for _ in range(n_imp):
            if _read_exact(f, 1) != b"M":
                raise LogFormatError(f"expected M entry in frame of V{child}")
            key = _get_bytes(f)
            (origin,) = _U64.unpack(_read_exact(f, 8))
            imps.append(Record(CompositeKey(key, origin), _get_bytes(f)))
        try:
            d = Delta(parents[0] if parents else None, child, tuple(adds), tuple(upds), tuple(dels), tuple(imps))
        except DeltaError as e:
            raise LogFormatError(f"frame of V{child}: {e}") from None
        yield child, parents, d


def dump_graph(graph: VersionGraph, out: BinaryIO) -> None:
    """Write frames in topological order, each relative to the first parent."""
    for v in graph.topo_order():
        ps = graph.parents[v]
        if not ps:
            write_frame(out, v, (), Delta(None, v, adds=graph.root_records))
        else:
            write_frame(out, v, ps, graph.delta(ps[0], v))


def load_graph(f: BinaryIO) -> VersionGraph:
    """Inverse of :func:`dump_graph`. Deltas on non-first merge edges are
    recomputed from materialized contents."""
    graph = None
    contents = {}
    for child, parents, d in read_frames(f):
        if not parents:
            if graph is not None:
                raise LogFormatError("second root frame")
            if d.updates or d.deletes or d.imports:
                raise LogFormatError("root frame may only add records")
            graph = VersionGraph(child, d.adds)
            contents[child] = as_content(d.adds)
            continue
        if graph is None:
            raise LogFormatError("first frame must be the root")
        for p in parents:
            if p not in contents:
                raise LogFormatError(f"V{child} refers to unknown parent V{p}")
        try:
            content = apply_to_content(contents[parents[0]], d)
        except DeltaError as e:
            raise LogFormatError(f"frame of V{child}: {e}") from None
        extra = [Delta.between(p, child, contents[p], content) for p in parents[1:]]
        graph.add_version(child, parents, [d] + extra)
        contents[child] = content
    if graph is None:
        raise LogFormatError("empty delta log")
    return graph


def dumps_graph(graph: VersionGraph) -> bytes:
    buf = io.BytesIO()
    dump_graph(graph, buf)
    return buf.getvalue()


def loads_graph(data: bytes) -> VersionGraph:
    return load_graph(io.BytesIO(data))


def encode_delta(child: int, parents: Tuple[int, ...], d: Delta) -> bytes:
    buf = io.BytesIO()
    write_frame(buf, child, parents, d)
    return buf.getvalue()


def decode_delta(data: bytes) -> Tuple[int, Tuple[int, ...], Delta]:
    frames: List = list(read_frames(io.BytesIO(data)))
    if len(frames) != 1:
        raise LogFormatError(f"expected one frame, found {len(frames)}")
    return frames[0]


# ------------------------------------------------------------ keyed frames
#
# Stored deltas are read mostly for one key at a time, so the delta store
# keeps them in a second layout: a fixed-width entry directory sorted by
# key, followed by a blob holding each key and payload.
#
#     b"VKD1" u64 child, u32 nParents, u64 parents..., u32 nEntries
#     nEntries x (u8 kind, u16 keyLen, u64 origin, u32 offset, u32 payloadLen)
#     blob
#     u32 crc32 of everything before it

_KD_MAGIC = b"VKD1"
_KD_HEAD = struct.Struct("<4sQI")
_KD_ENTRY = np.dtype([("kind", "u1"), ("klen", "<u2"), ("origin", "<u8"),
                      ("off", "<u4"), ("plen", "<u4")])
ADD, UPDATE, DELETE, IMPORT = range(4)


def encode_keyed(child: int, parents: Tuple[int, ...], d: Delta) -> bytes:
    rows = [(r.key, ADD, r.origin, r.payload) for r in d.adds]
    rows += [(r.key, UPDATE, r.origin, r.payload) for r in d.updates]
    rows += [(c.key, DELETE, c.origin, b"") for c in d.deletes]
    rows += [(r.key, IMPORT, r.origin, r.payload) for r in d.imports]
    rows.sort(key=lambda t: (t[0], t[1]))
    table = np.zeros(len(rows), dtype=_KD_ENTRY)
    blob = bytearray()
    for i, (key, kind, origin, payload) in enumerate(rows):
        table[i] = (kind, len(key), origin, len(blob), len(payload))
        blob += key
        blob += payload
    out = bytearray(_KD_HEAD.pack(_KD_MAGIC, child, len(parents)))
    out += struct.pack(f"<{len(parents)}Q", *parents)
    out += _U32.pack(len(rows))
    out += table.tobytes()
    out += blob
    out += _U32.pack(zlib.crc32(out))
    return bytes(out)


class KeyedDelta:
    """Read side of a keyed frame. Single-key lookups bisect the directory
    without touching other entries."""

    __slots__ = ("child", "parents", "_kind", "_klen", "_origin", "_off", "_plen", "_blob")

    def __init__(self, data: bytes):
        if len(data) < _KD_HEAD.size + 8:
            raise LogFormatError("keyed delta frame too short")
        body = memoryview(data)[:-4]
        if zlib.crc32(body) != _U32.unpack_from(data, len(data) - 4)[0]:
            raise LogFormatError("keyed delta frame fails its checksum")
        magic, self.child, n_par = _KD_HEAD.unpack_from(data, 0)
        if magic != _KD_MAGIC:
            raise LogFormatError(f"bad keyed delta magic {magic!r}")
        pos = _KD_HEAD.size
        if pos + 8 * n_par + 4 > len(body):
            raise LogFormatError("keyed delta header overruns frame")
        self.parents = struct.unpack_from(f"<{n_par}Q", data, pos)
        pos += 8 * n_par
        (n,) = _U32.unpack_from(data, pos)
        pos += 4
        end = pos + n * _KD_ENTRY.itemsize
        if end > len(body):
            raise LogFormatError("keyed delta directory overruns frame")
        table = np.frombuffer(data, dtype=_KD_ENTRY, count=n, offset=pos)
        self._blob = body[end:]
        self._kind, self._klen, self._origin = table["kind"], table["klen"], table["origin"]
        self._off, self._plen = table["off"], table["plen"]
        if n and (int(self._kind.max()) > IMPORT or
                  int((self._off.astype(np.int64) + self._klen + self._plen).max()) > len(self._blob)):
            raise LogFormatError("keyed delta entry out of range")

    def __len__(self) -> int:
        return len(self._kind)

    def _key(self, i: int) -> bytes:
        o = int(self._off[i])
        return bytes(self._blob[o:o + int(self._klen[i])])

    def _record(self, i: int) -> Record:
        o = int(self._off[i]) + int(self._klen[i])
        return Record(CompositeKey(self._key(i), int(self._origin[i])), bytes(self._blob[o:o + int(self._plen[i])]))

    def lookup(self, key: bytes) -> Tuple[bool, Optional[Record]]:
        """(touched, record): whether this delta writes or deletes ``key``,
        and the record it leaves behind (None for a delete)."""
        i = bisect.bisect_left(range(len(self._kind)), key, key=self._key)
        touched, rec = False, None
        while i < len(self._kind) and self._key(i) == key:
            touched = True
            if self._kind[i] != DELETE:
                rec = self._record(i)
            i += 1
        return touched, rec

    def delta(self) -> Delta:
        sinks = ([], [], [], [])
        for i, kind in enumerate(self._kind.tolist()):
            if kind == DELETE:
                sinks[DELETE].append(CompositeKey(self._key(i), self._origin[i]))
            else:
                sinks[kind].append(self._record(i))
        try:
            return Delta(self.parents[0] if self.parents else None, self.child, *map(tuple, sinks))
        except DeltaError as e:
            raise LogFormatError(f"keyed frame of V{self.child}: {e}") from None
