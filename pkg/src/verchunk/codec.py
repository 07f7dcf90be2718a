"""Byte-level delta codec and the compressed sub-chunk frame.

A delta is a stream of opcodes against a reference payload::

    0x00 <varint n> <n bytes>        insert literal bytes
    0x01 <varint off> <varint n>     copy n bytes of the reference from off

Sub-chunk frame, little-endian::

    u8 magic 0x53, u8 flags, u16 k, u16 count, u16 keyLen, key,
    u64 base origin, u32 baseLen, base bytes (zlib when flags & 1),
    per further member: u64 origin, u16 parent index, u32 opLen, ops
    u32 crc32 of everything above
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from .model import CompositeKey, Record

INSERT, COPY = 0, 1
MAGIC = 0x53
FLAG_ZLIB = 1
SEED = 8

_HEAD = struct.Struct("<BBHHH")
_BASE = struct.Struct("<QI")
_MEMBER = struct.Struct("<QHI")
_CRC = struct.Struct("<I")


class CodecError(ValueError):
    pass


def put_varint(out: bytearray, n: int) -> None:
    while n >= 0x80:
        out.append((n & 0x7F) | 0x80)
        n >>= 7
    out.append(n)


def get_varint(buf, pos: int) -> Tuple[int, int]:
    shift = n = 0
    while True:
        if pos >= len(buf):
            raise CodecError("truncated varint")
        b = buf[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        if b < 0x80:
            return n, pos
        shift += 7


def _common_prefix(a: bytes, b: bytes) -> int:
    lo, hi = 0, min(len(a), len(b))
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if a[:mid] == b[:mid]:
            lo = mid
        else:
            hi = mid - 1
    return lo


def _common_suffix(a: bytes, b: bytes, limit: int) -> int:
    lo, hi = 0, limit
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if a[len(a) - mid:] == b[len(b) - mid:]:
            lo = mid
        else:
            hi = mid - 1
    return lo


def encode_delta(ref: bytes, target: bytes) -> bytes:
    out = bytearray()
    pre = _common_prefix(ref, target)
    suf = _common_suffix(ref, target, min(len(ref), len(target)) - pre)
    if pre:
        out.append(COPY)
        put_varint(out, 0)
        put_varint(out, pre)
    _encode_middle(out, ref, target, pre, len(ref) - suf, pre, len(target) - suf)
    if suf:
        out.append(COPY)
        put_varint(out, len(ref) - suf)
        put_varint(out, suf)
    return bytes(out)


def _encode_middle(out: bytearray, ref: bytes, tgt: bytes, r0: int, r1: int, t0: int, t1: int) -> None:
    index = {}
    for i in range(r0, r1 - SEED + 1):
        index.setdefault(ref[i:i + SEED], i)
    lit_start = j = t0
    while j < t1:
        i = index.get(tgt[j:j + SEED]) if j + SEED <= t1 else None
        if i is None:
            j += 1
            continue
        n = SEED
        while j + n < t1 and i + n < r1 and tgt[j + n] == ref[i + n]:
            n += 1
        if j > lit_start:
            out.append(INSERT)
            put_varint(out, j - lit_start)
            out += tgt[lit_start:j]
        out.append(COPY)
        put_varint(out, i)
        put_varint(out, n)
        j += n
        lit_start = j
    if t1 > lit_start:
        out.append(INSERT)
        put_varint(out, t1 - lit_start)
        out += tgt[lit_start:t1]


def _varint_at(buf, pos: int) -> Tuple[int, int]:
    if pos < len(buf) and buf[pos] < 0x80:
        return buf[pos], pos + 1
    return get_varint(buf, pos)


def decode_delta(ref: bytes, ops: bytes) -> bytes:
    out = bytearray()
    pos = 0
    end = len(ops)
    while pos < end:
        op = ops[pos]
        pos += 1
        if op == INSERT:
            n, pos = _varint_at(ops, pos)
            if pos + n > end:
                raise CodecError("insert runs past the opcode stream")
            out += ops[pos:pos + n]
            pos += n
        elif op == COPY:
            off, pos = _varint_at(ops, pos)
            n, pos = _varint_at(ops, pos)
            if off + n > len(ref):
                raise CodecError("copy outside the reference")
            out += ref[off:off + n]
        else:
            raise CodecError(f"bad opcode {op}")
    return bytes(out)


def compress_members(members: Sequence[Record], parents: Sequence[int], k: int = 0,
                     block: bool = False) -> bytes:
    """Encode records of one primary key. ``parents[i]`` is the index of the
    member that member i is delta-encoded against (ignored for i == 0)."""
    if not members:
        raise CodecError("empty sub-chunk")
    key = members[0].key
    if any(m.key != key for m in members):
        raise CodecError("sub-chunk members must share a primary key")
    base = members[0].payload
    flags = 0
    if block:
        base = zlib.compress(base, 6)
        flags |= FLAG_ZLIB
    out = bytearray(_HEAD.pack(MAGIC, flags, min(k or len(members), 0xFFFF), len(members), len(key)))
    out += key
    out += _BASE.pack(members[0].origin, len(base))
    out += base
    for i in range(1, len(members)):
        p = parents[i]
        if not 0 <= p < i:
            raise CodecError(f"member {i} must reference an earlier member, got {p}")
        ops = encode_delta(members[p].payload, members[i].payload)
        out += _MEMBER.pack(members[i].origin, p, len(ops))
        out += ops
    out += _CRC.pack(zlib.crc32(out))
    return bytes(out)


@dataclass
class MemberFrame:
    """A parsed sub-chunk frame whose members are decoded on request."""
    k: int
    key: bytes
    origins: List[int]
    parents: List[int]
    base: bytes
    ops: List[bytes]                        # ops[0] is unused
    decoded: Dict[int, bytes] = field(default_factory=dict)

    def payload(self, i: int) -> bytes:
        chain = []
        j = i
        while j not in self.decoded and j != 0:
            chain.append(j)
            j = self.parents[j]
        cur = self.decoded.get(j, self.base) if j else self.base
        for j in reversed(chain):
            cur = decode_delta(cur, self.ops[j])
            self.decoded[j] = cur
        return cur


def parse_members(data: bytes) -> MemberFrame:
    """Checks and splits a sub-chunk frame without decoding any delta."""
    if len(data) < _HEAD.size + _CRC.size:
        raise CodecError("sub-chunk frame too short")
    (crc,) = _CRC.unpack_from(data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CodecError("sub-chunk checksum mismatch")
    magic, flags, k, count, klen = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise CodecError("bad sub-chunk magic")
    try:
        pos = _HEAD.size
        key = bytes(data[pos:pos + klen])
        pos += klen
        origin, blen = _BASE.unpack_from(data, pos)
        pos += _BASE.size
        base = bytes(data[pos:pos + blen])
        pos += blen
        if flags & FLAG_ZLIB:
            base = zlib.decompress(base)
        origins, parents, ops = [origin], [0], [b""]
        for i in range(1, count):
            origin, p, oplen = _MEMBER.unpack_from(data, pos)
            pos += _MEMBER.size
            if p >= i:
                raise CodecError("member references a later member")
            origins.append(origin)
            parents.append(p)
            ops.append(bytes(data[pos:pos + oplen]))
            pos += oplen
    except (struct.error, zlib.error) as e:
        raise CodecError(f"malformed sub-chunk frame: {e}") from None
    if pos != len(data) - 4:
        raise CodecError("trailing bytes in sub-chunk frame")
    return MemberFrame(k, key, origins, parents, base, ops)


def decompress_members(data: bytes) -> Tuple[int, List[Record], List[int]]:
    """Returns (k, members, parents)."""
    f = parse_members(data)
    members = [Record(CompositeKey(f.key, o), f.payload(i)) for i, o in enumerate(f.origins)]
    return f.k, members, list(f.parents)
