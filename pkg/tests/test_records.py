import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from defolab import records

MAGIC = b"TESTREC1"


def test_round_trip_preserves_bits(rng):
    tensors = {"a": rng.normal(size=(3, 4)), "b": np.array(7.5), "c": np.array([-0.0, np.pi])}
    meta = {"kind": "unit", "note": "x = y"}
    got_meta, got = records.decode(records.encode(MAGIC, meta, tensors), MAGIC)
    assert got_meta == meta
    assert list(got) == list(tensors)
    for k, v in tensors.items():
        assert got[k].shape == v.shape
        assert got[k].tobytes() == v.tobytes()


@given(arrays(np.float64, array_shapes(max_dims=3, max_side=4),
              elements=st.floats(allow_nan=False, width=64)))
def test_round_trip_property(x):
    _, got = records.decode(records.encode(MAGIC, {}, {"x": x}), MAGIC)
    assert got["x"].tobytes() == x.tobytes()


def test_layout_header_and_trailer():
    buf = records.encode(MAGIC, {}, {"z": np.zeros(2)})
    assert buf[:8] == MAGIC
    assert struct.unpack("<I", buf[8:12])[0] == records.FORMAT_VERSION
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])


def test_flipped_byte_is_a_checksum_error(rng):
    buf = bytearray(records.encode(MAGIC, {}, {"w": rng.normal(size=16)}))
    buf[60] ^= 0x01
    with pytest.raises(records.ChecksumError):
        records.decode(bytes(buf), MAGIC)


def test_truncated_file(rng):
    buf = records.encode(MAGIC, {}, {"w": rng.normal(size=16)})
    with pytest.raises(records.RecordError):
        records.decode(buf[:-20], MAGIC)
    with pytest.raises(records.TruncatedError):
        records.decode(buf[:10], MAGIC)


def test_wrong_magic():
    buf = records.encode(MAGIC, {}, {"w": np.ones(1)})
    with pytest.raises(records.RecordError, match="magic"):
        records.decode(buf, b"OTHERMAG")


def test_version_mismatch():
    buf = bytearray(records.encode(MAGIC, {}, {"w": np.ones(1)}))
    buf[8:12] = struct.pack("<I", records.FORMAT_VERSION + 1)
    body = bytes(buf[:-4])
    with pytest.raises(records.VersionError):
        records.decode(body + struct.pack("<I", zlib.crc32(body)), MAGIC)


def test_meta_rejects_multiline_values():
    with pytest.raises(records.RecordError):
        records.encode(MAGIC, {"k": "two\nlines"}, {})


def test_parse_meta_reports_line():
    with pytest.raises(records.RecordError, match="line 2"):
        records.parse_meta("a = 1\nnot a pair\n")


def test_write_and_read_file(tmp_path, rng):
    w = rng.normal(size=(2, 2))
    crc = records.write(tmp_path / "r.bin", MAGIC, {"k": "v"}, {"w": w})
    assert crc == zlib.crc32((tmp_path / "r.bin").read_bytes())
    meta, got = records.read(tmp_path / "r.bin", MAGIC)
    assert meta == {"k": "v"} and np.array_equal(got["w"], w)
