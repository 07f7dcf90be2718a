"""Key-value backends and the chunk frame.

Keys are namespaced: ``C:`` chunks, ``I:`` indexes, ``D:`` the delta store
(baseline engines use ``B:``, ``S:`` and ``R:``).

Chunk frame, little-endian::

    b"VCK1", u64 chunk id, u32 item count, u32 version count
    per item: u8 kind (0 record, 1 sub-chunk), u16 keyLen, key,
              u32 member count, member origins as u64, u64 rep origin,
              u32 payload length
    item payloads back to back
    version table, per version: u64 version, u32 entry count, u32 byte length
    the varint gaps between ordinals into the member list, version by version
    u32 crc32 of everything above

File backend log frames: ``u32 keyLen, key, u32 valLen, val, u32 crc``;
``valLen == 0xFFFFFFFF`` marks a deletion.
"""
from __future__ import annotations

import logging
import os
import struct
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .codec import CodecError, get_varint, put_varint
from .model import CompositeKey, Record, VersionId
from .subchunk import SubChunk

log = logging.getLogger(__name__)

CHUNK_NS, INDEX_NS, DELTA_NS = b"C:", b"I:", b"D:"


class StorageError(Exception):
    pass


class CorruptFrame(StorageError):
    pass


class MissingKeys(StorageError):
    def __init__(self, missing):
        super().__init__(f"missing keys: {missing!r}")
        self.missing = list(missing)


def chunk_key(cid: int) -> bytes:
    return CHUNK_NS + cid.to_bytes(8, "big")


def chunk_id_of(key: bytes) -> int:
    return int.from_bytes(key[len(CHUNK_NS):], "big")


def delta_key(v: int) -> bytes:
    return DELTA_NS + v.to_bytes(8, "big")


def index_key(name: str) -> bytes:
    return INDEX_NS + name.encode()


# ------------------------------------------------------------------ backends

@dataclass
class Counters:
    requests: int = 0
    gets: int = 0
    puts: int = 0
    deletes: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    puts_by_ns: Dict[bytes, int] = field(default_factory=dict)

    @property
    def bytes_transferred(self) -> int:
        return self.bytes_read + self.bytes_written

    def snapshot(self) -> "Counters":
        return Counters(self.requests, self.gets, self.puts, self.deletes, self.bytes_read,
                        self.bytes_written, dict(self.puts_by_ns))

    def minus(self, other: "Counters") -> "Counters":
        ns = {k: v - other.puts_by_ns.get(k, 0) for k, v in self.puts_by_ns.items()}
        return Counters(self.requests - other.requests, self.gets - other.gets, self.puts - other.puts,
                        self.deletes - other.deletes, self.bytes_read - other.bytes_read,
                        self.bytes_written - other.bytes_written, {k: v for k, v in ns.items() if v})


class KvBackend:
    """get/put/delete/multi_get/scan_prefix over opaque byte keys."""

    def __init__(self):
        self.counters = Counters()
        self._clock = threading.Lock()

    # subclasses implement the _raw_* methods
    def _raw_get(self, key: bytes) -> Optional[bytes]:
        raise NotImplementedError

    def _raw_put(self, key: bytes, value: bytes) -> None:
        raise NotImplementedError

    def _raw_delete(self, key: bytes) -> None:
        raise NotImplementedError

    def _raw_keys(self, prefix: bytes) -> List[bytes]:
        raise NotImplementedError

    def _count(self, gets=0, puts=0, deletes=0, read=0, written=0, key=b""):
        with self._clock:
            c = self.counters
            c.requests += gets + puts + deletes
            c.gets += gets
            c.puts += puts
            c.deletes += deletes
            c.bytes_read += read
            c.bytes_written += written
            if puts:
                ns = key[:2]
                c.puts_by_ns[ns] = c.puts_by_ns.get(ns, 0) + puts

    def get(self, key: bytes) -> Optional[bytes]:
        v = self._raw_get(key)
        self._count(gets=1, read=len(v) if v is not None else 0)
        return v

    def put(self, key: bytes, value: bytes) -> None:
        self._raw_put(key, bytes(value))
        self._count(puts=1, written=len(value), key=key)

    def delete(self, key: bytes) -> None:
        self._raw_delete(key)
        self._count(deletes=1, key=key)

    def multi_get(self, keys: Sequence[bytes], parallelism: int = 1) -> Dict[bytes, Optional[bytes]]:
        if parallelism <= 1 or len(keys) <= 1:
            return {k: self.get(k) for k in keys}
        with ThreadPoolExecutor(max_workers=min(parallelism, len(keys))) as pool:
            return dict(zip(keys, pool.map(self.get, keys)))

    def scan_prefix(self, prefix: bytes) -> Iterator[Tuple[bytes, bytes]]:
        for k in sorted(self._raw_keys(prefix)):
            v = self._raw_get(k)
            if v is not None:
                self._count(gets=1, read=len(v))
                yield k, v

    def keys(self, prefix: bytes = b"") -> List[bytes]:
        return sorted(self._raw_keys(prefix))

    def close(self) -> None:
        pass


class MemoryBackend(KvBackend):
    def __init__(self):
        super().__init__()
        self._data: Dict[bytes, bytes] = {}
        self._lock = threading.Lock()

    def _raw_get(self, key):
        return self._data.get(key)

    def multi_get(self, keys, parallelism=1):
        # nothing to overlap in memory; threads would only add overhead
        return {k: self.get(k) for k in keys}

    def _raw_put(self, key, value):
        with self._lock:
            self._data[key] = value

    def _raw_delete(self, key):
        with self._lock:
            self._data.pop(key, None)

    def _raw_keys(self, prefix):
        with self._lock:
            return [k for k in self._data if k.startswith(prefix)]


_LOG_HEAD = struct.Struct("<I")
_TOMBSTONE = 0xFFFFFFFF


class FileBackend(KvBackend):
    """Append-only log file with an in-memory key directory rebuilt on open.
    A torn tail (crash mid-append) is truncated away on open."""

    def __init__(self, path: str):
        super().__init__()
        self.path = path
        self._lock = threading.Lock()
        self._dir: Dict[bytes, Tuple[int, int]] = {}
        mode = "r+b" if os.path.exists(path) else "w+b"
        self._f = open(path, mode)
        self._recover()

    def _recover(self) -> None:
        f = self._f
        f.seek(0)
        data = f.read()
        pos = 0
        good = 0
        while pos + 4 <= len(data):
            (klen,) = _LOG_HEAD.unpack_from(data, pos)
            p = pos + 4
            if p + klen + 4 > len(data):
                break
            key = data[p:p + klen]
            p += klen
            (vlen,) = _LOG_HEAD.unpack_from(data, p)
            p += 4
            n = 0 if vlen == _TOMBSTONE else vlen
            if p + n + 4 > len(data):
                break
            (crc,) = _LOG_HEAD.unpack_from(data, p + n)
            if zlib.crc32(data[pos:p + n]) != crc:
                break
            if vlen == _TOMBSTONE:
                self._dir.pop(key, None)
            else:
                self._dir[key] = (p, n)
            pos = good = p + n + 4
        if good != len(data):
            log.warning("%s: dropping %d bytes of torn log tail", self.path, len(data) - good)
            f.truncate(good)
        f.seek(0, os.SEEK_END)

    def _append(self, key: bytes, value: Optional[bytes]) -> Optional[int]:
        head = _LOG_HEAD.pack(len(key)) + key
        if value is None:
            body = head + _LOG_HEAD.pack(_TOMBSTONE)
        else:
            body = head + _LOG_HEAD.pack(len(value)) + value
        frame = body + _LOG_HEAD.pack(zlib.crc32(body))
        with self._lock:
            off = self._f.seek(0, os.SEEK_END)
            self._f.write(frame)
            self._f.flush()
            if value is None:
                self._dir.pop(key, None)
                return None
            self._dir[key] = (off + len(head) + 4, len(value))
        return off

    def _raw_get(self, key):
        loc = self._dir.get(key)
        if loc is None:
            return None
        return os.pread(self._f.fileno(), loc[1], loc[0])

    def _raw_put(self, key, value):
        self._append(key, value)

    def _raw_delete(self, key):
        if key in self._dir:
            self._append(key, None)

    def _raw_keys(self, prefix):
        with self._lock:
            return [k for k in self._dir if k.startswith(prefix)]

    def close(self) -> None:
        with self._lock:
            if not self._f.closed:
                os.fsync(self._f.fileno())
                self._f.close()


class LatencySimBackend(KvBackend):
    """Charges ``per_request + per_byte * len(value)`` seconds per request.

    Time is kept on a virtual clock (``elapsed``); a batch fetched with
    parallelism P is charged the makespan of P lanes. With ``realtime`` the
    charges are also slept, concurrently across lanes.
    """

    def __init__(self, inner: KvBackend, per_request: float = 0.0005, per_byte: float = 0.0,
                 realtime: bool = False):
        super().__init__()
        self.inner = inner
        self.per_request = per_request
        self.per_byte = per_byte
        self.realtime = realtime
        self.elapsed = 0.0
        self._pool: Optional[ThreadPoolExecutor] = None

    def cost(self, nbytes: int) -> float:
        return self.per_request + self.per_byte * nbytes

    def _raw_get(self, key):
        return self.inner._raw_get(key)

    def _raw_put(self, key, value):
        self.inner._raw_put(key, value)

    def _raw_delete(self, key):
        self.inner._raw_delete(key)

    def _raw_keys(self, prefix):
        return self.inner._raw_keys(prefix)

    def _charge(self, seconds: float) -> None:
        with self._clock:
            self.elapsed += seconds

    def get(self, key):
        v = super().get(key)
        c = self.cost(len(v) if v is not None else 0)
        if self.realtime:
            time.sleep(c)
        self._charge(c)
        return v

    def put(self, key, value):
        super().put(key, value)
        c = self.cost(len(value))
        if self.realtime:
            time.sleep(c)
        self._charge(c)

    def multi_get(self, keys, parallelism=1):
        keys = list(keys)
        if not keys:
            return {}
        lanes = max(1, min(parallelism, len(keys)))
        if self.realtime and lanes > 1:
            if self._pool is None or self._pool._max_workers < lanes:
                self._pool = ThreadPoolExecutor(max_workers=lanes)
            vals = list(self._pool.map(self._sleepy_get, keys))
        else:
            vals = []
            for k in keys:
                v = self.inner._raw_get(k)
                self._count(gets=1, read=len(v) if v is not None else 0)
                if self.realtime:
                    time.sleep(self.cost(len(v) if v is not None else 0))
                vals.append(v)
        # virtual makespan: each request goes to the lane that frees first
        free = [0.0] * lanes
        for v in vals:
            i = min(range(lanes), key=free.__getitem__) if lanes > 1 else 0
            free[i] += self.cost(len(v) if v is not None else 0)
        self._charge(max(free))
        return dict(zip(keys, vals))

    def _sleepy_get(self, key):
        v = self.inner._raw_get(key)
        self._count(gets=1, read=len(v) if v is not None else 0)
        time.sleep(self.cost(len(v) if v is not None else 0))
        return v

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
        self.inner.close()


class FaultyBackend(KvBackend):
    """Wraps a backend and raises after a set number of further writes;
    used to simulate a crash."""

    class Crash(Exception):
        pass

    def __init__(self, inner: KvBackend, fail_after: Optional[int] = None):
        super().__init__()
        self.inner = inner
        self.fail_after = fail_after

    def _tick(self):
        if self.fail_after is not None:
            if self.fail_after <= 0:
                raise FaultyBackend.Crash("simulated crash")
            self.fail_after -= 1

    def _raw_get(self, key):
        return self.inner._raw_get(key)

    def _raw_put(self, key, value):
        self._tick()
        self.inner._raw_put(key, value)

    def _raw_delete(self, key):
        self._tick()
        self.inner._raw_delete(key)

    def _raw_keys(self, prefix):
        return self.inner._raw_keys(prefix)


# ------------------------------------------------------------------ chunks

Item = Union[Record, SubChunk]

_CHUNK_MAGIC = b"VCK1"
_CH_HEAD = struct.Struct("<4sQII")
_KLEN = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_VHEAD = struct.Struct("<QII")
_VTABLE = np.dtype([("v", "<u8"), ("count", "<u4"), ("glen", "<u4")])


class ChunkMap(Mapping[VersionId, List[CompositeKey]]):
    """Read-only chunk map over a decoded frame; a version's list is only
    decoded when it is looked up."""

    def __init__(self, versions, counts, starts, ends, data, flat: List[CompositeKey]):
        self._vs = versions
        self._counts = counts
        self._starts = starts
        self._ends = ends
        self._data = data
        self._flat = flat

    def _find(self, v) -> int:
        if not isinstance(v, int) or v < 0:
            return -1
        i = int(np.searchsorted(self._vs, v))
        return i if i < len(self._vs) and int(self._vs[i]) == v else -1

    def __getitem__(self, v: VersionId) -> List[CompositeKey]:
        i = self._find(v)
        if i < 0:
            raise KeyError(v)
        count, pos, end = int(self._counts[i]), int(self._starts[i]), int(self._ends[i])
        data, flat = self._data, self._flat
        prev = -1
        out = []
        try:
            if end - pos == count:                  # every gap fits one byte
                for g in data[pos:end]:
                    if g & 0x80:
                        raise CorruptFrame("chunk map length mismatch")
                    prev += g + 1
                    out.append(flat[prev])
            else:
                for _ in range(count):
                    g, pos = get_varint(data, pos)
                    prev += g + 1
                    out.append(flat[prev])
                if pos != end:
                    raise CorruptFrame("chunk map length mismatch")
        except (IndexError, CodecError) as e:
            raise CorruptFrame(f"malformed chunk map: {e}") from None
        return out

    def __contains__(self, v) -> bool:
        return self._find(v) >= 0

    def __iter__(self) -> Iterator[VersionId]:
        return iter(self._vs.tolist())

    def __len__(self) -> int:
        return len(self._vs)

    def __repr__(self) -> str:
        return f"ChunkMap({dict(self)!r})"


def item_cks(item: Item) -> List[CompositeKey]:
    if isinstance(item, Record):
        return [item.ck]
    return list(item.cks)


def item_payload(item: Item) -> bytes:
    return item.payload if isinstance(item, Record) else item.compressed


@dataclass
class SealedChunk:
    """A chunk as stored: items plus the per-version lists of the composite
    keys it holds for that version, kept in item order."""
    id: int
    items: List[Item]
    chunk_map: Dict[VersionId, List[CompositeKey]] = field(default_factory=dict)

    def __post_init__(self):
        order = self.ordinals()
        canon = {}
        for v in sorted(self.chunk_map):
            cks = self.chunk_map[v]
            try:
                canon[v] = sorted(set(cks), key=order.__getitem__)
            except KeyError as e:
                raise StorageError(f"chunk {self.id} maps V{v} to {e.args[0]!r} which it does not hold") from None
        self.chunk_map = canon

    @classmethod
    def _decoded(cls, cid: int, items: List[Item], cmap: Dict[VersionId, List[CompositeKey]]) -> "SealedChunk":
        """A chunk read from a frame: ordinals increase by construction and
        versions were written in order, so the map is already canonical."""
        c = cls.__new__(cls)
        c.id, c.items, c.chunk_map = cid, items, cmap
        return c

    def ordinals(self) -> Dict[CompositeKey, int]:
        out = {}
        for it in self.items:
            for c in item_cks(it):
                out[c] = len(out)
        return out

    @property
    def byte_size(self) -> int:
        return sum(len(item_payload(i)) for i in self.items)

    def records_for(self, v: VersionId) -> List[Record]:
        """Records of version v held here, decompressing sub-chunks."""
        wanted = self.chunk_map.get(v)
        if not wanted:
            return []
        want = set(wanted)
        out = []
        for it in self.items:
            if isinstance(it, Record):
                if it.ck in want:
                    out.append(it)
            else:
                out.extend(it.select(want))
        return out

    def all_records(self) -> Iterator[Record]:
        for it in self.items:
            if isinstance(it, Record):
                yield it
            else:
                yield from it.members


def serialize_chunk(c: SealedChunk) -> bytes:
    out = bytearray(_CH_HEAD.pack(_CHUNK_MAGIC, c.id, len(c.items), len(c.chunk_map)))
    payloads = []
    for it in c.items:
        if isinstance(it, Record):
            out.append(0)
            out += _KLEN.pack(len(it.key)) + it.key
            out += _U32.pack(1) + _U64.pack(it.origin) + _U64.pack(it.origin)
        else:
            out.append(1)
            out += _KLEN.pack(len(it.key)) + it.key
            out += _U32.pack(len(it.origins))
            for o in it.origins:
                out += _U64.pack(o)
            out += _U64.pack(it.rep_ck.origin)
        p = item_payload(it)
        out += _U32.pack(len(p))
        payloads.append(p)
    for p in payloads:
        out += p
    order = c.ordinals()
    gaps = bytearray()
    for v, cks in c.chunk_map.items():
        start = len(gaps)
        prev = -1
        for ck in cks:
            o = order[ck]
            put_varint(gaps, o - prev - 1)
            prev = o
        out += _VHEAD.pack(v, len(cks), len(gaps) - start)
    out += gaps
    out += _U32.pack(zlib.crc32(out))
    return bytes(out)


def deserialize_chunk(data: bytes) -> SealedChunk:
    if len(data) < _CH_HEAD.size + 4:
        raise CorruptFrame("chunk frame too short")
    (crc,) = _U32.unpack_from(data, len(data) - 4)
    if zlib.crc32(memoryview(data)[:-4]) != crc:
        raise CorruptFrame("chunk checksum mismatch")
    try:
        magic, cid, n_items, n_versions = _CH_HEAD.unpack_from(data, 0)
        if magic != _CHUNK_MAGIC:
            raise CorruptFrame("bad chunk magic")
        pos = _CH_HEAD.size
        directory = []
        for _ in range(n_items):
            kind = data[pos]
            pos += 1
            (klen,) = _KLEN.unpack_from(data, pos)
            pos += 2
            key = bytes(data[pos:pos + klen])
            pos += klen
            (n,) = _U32.unpack_from(data, pos)
            pos += 4
            origins = list(struct.unpack_from(f"<{n}Q", data, pos))
            pos += 8 * n
            (rep,) = _U64.unpack_from(data, pos)
            pos += 8
            (plen,) = _U32.unpack_from(data, pos)
            pos += 4
            directory.append((kind, key, origins, rep, plen))
        items: List[Item] = []
        flat: List[CompositeKey] = []
        for kind, key, origins, rep, plen in directory:
            payload = bytes(data[pos:pos + plen])
            pos += plen
            if kind == 0:
                items.append(Record(CompositeKey(key, origins[0]), payload))
            elif kind == 1:
                sc = SubChunk.from_bytes(payload, CompositeKey(key, rep))
                if sc.origins != origins or sc.key != key:
                    raise CorruptFrame("sub-chunk directory disagrees with its payload")
                items.append(sc)
            else:
                raise CorruptFrame(f"unknown item kind {kind}")
            flat.extend(CompositeKey(key, o) for o in origins)
        table = np.frombuffer(data, dtype=_VTABLE, count=n_versions, offset=pos)
        pos += n_versions * _VHEAD.size
        ends = pos + np.cumsum(table["glen"], dtype=np.int64)
        if n_versions:
            if np.any(table["v"][1:] <= table["v"][:-1]):
                raise CorruptFrame("chunk map versions out of order")
            if np.any(table["count"] > table["glen"]):
                raise CorruptFrame("chunk map length mismatch")
            pos = int(ends[-1])
        cmap = ChunkMap(table["v"], table["count"], ends - table["glen"], ends, data, flat)
        if pos != len(data) - 4:
            raise CorruptFrame("trailing bytes in chunk frame")
    except (struct.error, IndexError, ValueError, CodecError) as e:
        raise CorruptFrame(f"malformed chunk frame: {e}") from None
    return SealedChunk._decoded(cid, items, cmap)


def put_chunk(backend: KvBackend, chunk: SealedChunk) -> int:
    backend.put(chunk_key(chunk.id), serialize_chunk(chunk))
    return chunk.id


def get_chunk(backend: KvBackend, cid: int) -> SealedChunk:
    data = backend.get(chunk_key(cid))
    if data is None:
        raise MissingKeys([cid])
    return deserialize_chunk(data)


def multi_get_chunks(backend: KvBackend, ids: Iterable[int], parallelism: int = 16) -> List[SealedChunk]:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise StorageError("chunk ids must be distinct")
    if not ids:
        return []
    got = backend.multi_get([chunk_key(i) for i in ids], parallelism)
    missing = [i for i in ids if got[chunk_key(i)] is None]
    if missing:
        raise MissingKeys(missing)
    return [deserialize_chunk(got[chunk_key(i)]) for i in ids]
