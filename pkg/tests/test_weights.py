import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stmx import weights as wio

names = st.text("abcdefghij._0123456789", min_size=1, max_size=12)
tensors = st.dictionaries(
    names,
    arrays(np.float32, st.lists(st.integers(0, 4), max_size=3).map(tuple),
           elements=st.floats(-1e6, 1e6, width=32, allow_nan=False)),
    max_size=5,
)


@settings(max_examples=50, deadline=None)
@given(tensors=tensors, meta=st.dictionaries(st.sampled_from(["kind", "note"]), st.text("xyz01", min_size=1, max_size=5)))
def test_pack_unpack_round_trip(tensors, meta):
    blob = wio.pack(tensors, meta, "a = 1\nb = 2")
    out, meta2, cfg = wio.unpack(blob)
    assert list(out) == list(tensors)
    for k, v in tensors.items():
        assert out[k].shape == v.shape
        assert out[k].tobytes() == v.tobytes()
    assert meta2 == {k: str(v) for k, v in meta.items()}
    assert cfg == "a = 1\nb = 2"
    assert wio.pack(out, meta2, cfg) == blob


def test_scalar_and_empty_tensors():
    blob = wio.pack({"s": np.float32(2.5), "e": np.zeros((0, 3), np.float32)})
    out, _, _ = wio.unpack(blob)
    assert out["s"].shape == () and out["s"] == 2.5
    assert out["e"].shape == (0, 3)


@pytest.fixture
def blob():
    return wio.pack({"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(4, np.float32)}, {"kind": "x"})


def test_bad_magic(blob):
    with pytest.raises(wio.MagicError):
        wio.unpack(b"NOPE" + blob[4:])
    with pytest.raises(wio.MagicError):
        wio.unpack(b"ST")


def test_bad_version(blob):
    with pytest.raises(wio.VersionError):
        wio.unpack(blob[:4] + struct.pack("<I", 99) + blob[8:])


def test_truncated_payload(blob):
    with pytest.raises(wio.TruncatedPayloadError):
        wio.unpack(blob[:-3])


def test_truncated_header(blob):
    with pytest.raises(wio.TruncatedPayloadError):
        wio.unpack(blob[:20])


def test_trailing_bytes(blob):
    with pytest.raises(wio.ShapeTableError):
        wio.unpack(blob + b"\0\0\0\0")


def test_header_garbage():
    with pytest.raises(wio.HeaderError):
        wio.unpack(_with_header(b"bogus line\n"))
    with pytest.raises(wio.HeaderError):
        wio.unpack(_with_header(b"\xff\xfe\n"))


def test_shape_table_inconsistent():
    with pytest.raises(wio.ShapeTableError):
        wio.unpack(_with_header(b"tensor a 2x2 0 12\n") + b"\0" * 12)
    with pytest.raises(wio.ShapeTableError):
        wio.unpack(_with_header(b"tensor a 2xq 0 16\n") + b"\0" * 16)
    with pytest.raises(wio.ShapeTableError):
        wio.unpack(_with_header(b"tensor a 1 4 4\n") + b"\0" * 8)


def test_errors_share_base_class():
    for cls in (wio.MagicError, wio.VersionError, wio.TruncatedPayloadError, wio.HeaderError, wio.ShapeTableError):
        assert issubclass(cls, wio.WeightFormatError)


def test_whitespace_names_rejected():
    with pytest.raises(ValueError):
        wio.pack({"a b": np.zeros(1)})


def _with_header(header: bytes) -> bytes:
    return struct.pack("<4sII", b"STMX", 1, len(header)) + header
