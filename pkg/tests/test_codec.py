import zlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from verchunk.codec import (CodecError, compress_members, decode_delta, decompress_members, encode_delta,
                            get_varint, put_varint)
from verchunk.model import CompositeKey, Record


@given(st.integers(0, 2**64 - 1))
def test_varint_roundtrip(n):
    out = bytearray()
    put_varint(out, n)
    assert get_varint(out, 0) == (n, len(out))


def test_varint_sizes_and_truncation():
    for n, size in [(0, 1), (127, 1), (128, 2), (16383, 2), (16384, 3)]:
        out = bytearray()
        put_varint(out, n)
        assert len(out) == size
    with pytest.raises(CodecError):
        get_varint(b"\x80", 0)


@given(st.binary(max_size=300), st.binary(max_size=300))
def test_delta_roundtrip(ref, tgt):
    assert decode_delta(ref, encode_delta(ref, tgt)) == tgt


def test_small_edit_gives_small_delta():
    ref = bytes(range(256)) * 4
    tgt = bytearray(ref)
    tgt[500] ^= 0xFF
    ops = encode_delta(ref, bytes(tgt))
    assert len(ops) < 20


@pytest.mark.parametrize("ops", [b"\x02", b"\x01\x10\x05", b"\x00\x05ab"])
def test_bad_delta_streams(ops):
    with pytest.raises(CodecError):
        decode_delta(b"abc", ops)


members_st = st.lists(st.binary(min_size=0, max_size=120), min_size=1, max_size=8)


@given(members_st, st.data(), st.booleans())
def test_member_frame_roundtrip(payloads, data, block):
    members = [Record(CompositeKey(b"key", i * 3), p) for i, p in enumerate(payloads)]
    parents = [0] + [data.draw(st.integers(0, i - 1)) for i in range(1, len(members))]
    blob = compress_members(members, parents, k=5, block=block)
    k, back, ps = decompress_members(blob)
    assert (k, back, ps) == (5, members, parents)


def test_frame_rejects_mixed_keys_and_forward_refs():
    a, b = Record(CompositeKey(b"a", 0), b"x"), Record(CompositeKey(b"b", 1), b"y")
    with pytest.raises(CodecError):
        compress_members([a, b], [0, 0])
    with pytest.raises(CodecError):
        compress_members([a, Record(CompositeKey(b"a", 1), b"y")], [0, 1])
    with pytest.raises(CodecError):
        compress_members([], [])


def test_corrupted_frame_fails_checksum():
    members = [Record(CompositeKey(b"k", i), b"payload %d" % i) for i in range(3)]
    blob = bytearray(compress_members(members, [0, 0, 1]))
    for pos in (0, 5, len(blob) // 2, len(blob) - 1):
        bad = bytearray(blob)
        bad[pos] ^= 0x40
        with pytest.raises(CodecError):
            decompress_members(bytes(bad))
    with pytest.raises(CodecError):
        decompress_members(b"\x53\x00")


def test_trailing_bytes_detected_even_with_valid_crc():
    blob = compress_members([Record(CompositeKey(b"k", 0), b"abc")], [0])
    body = blob[:-4] + b"zz"
    forged = body + zlib.crc32(body).to_bytes(4, "little")
    with pytest.raises(CodecError):
        decompress_members(forged)
