import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from refseg.tensor_io import (
    BadMagicError, DimsOverflowError, NonFiniteTensorError, SeededRng, TruncatedPayloadError,
    UnsupportedDtypeError, UnsupportedVersionError, decode_tensor, load_named_tensors, read_pgm,
    read_tensor, rng_derive, save_named_tensors, write_pgm, write_tensor,
)

shapes = hnp.array_shapes(min_dims=1, max_dims=4, min_side=0, max_side=6)
f32 = hnp.arrays(np.float32, shapes, elements=st.floats(-1e6, 1e6, width=32))
u8 = hnp.arrays(np.uint8, shapes)


@settings(max_examples=1000)
@given(st.one_of(f32, u8))
def test_roundtrip_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("t") / "a.rgtf"
    write_tensor(arr, path)
    back = read_tensor(path)
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_header_layout(tmp_path):
    write_tensor(np.zeros((2, 3), np.uint8), tmp_path / "a.rgtf")
    raw = (tmp_path / "a.rgtf").read_bytes()
    assert raw[:4] == b"RGTF"
    assert struct.unpack("<BBI2I", raw[4:18]) == (1, 1, 2, 2, 3)
    assert len(raw) == 18 + 6


def test_payload_is_little_endian(tmp_path):
    write_tensor(np.array([1.0], np.float32), tmp_path / "a.rgtf")
    assert (tmp_path / "a.rgtf").read_bytes()[-4:] == struct.pack("<f", 1.0)


def _blob(version=1, code=0, ndim=1, dims=(2,), payload=b"\0" * 8):
    return b"RGTF" + struct.pack("<BBI", version, code, ndim) + struct.pack(f"<{len(dims)}I", *dims) + payload


@pytest.mark.parametrize(
    "blob, err",
    [
        (b"XXXX" + _blob()[4:], BadMagicError),
        (b"RG", BadMagicError),
        (_blob(version=2), UnsupportedVersionError),
        (_blob(code=7), UnsupportedDtypeError),
        (_blob(ndim=5, dims=(1,) * 5), DimsOverflowError),
        (_blob(ndim=0, dims=()), DimsOverflowError),
        (_blob(payload=b"\0" * 7), TruncatedPayloadError),
        (_blob(ndim=3, dims=(1,), payload=b""), TruncatedPayloadError),
        (_blob(ndim=4, dims=(65536, 65536, 65536, 65536)), DimsOverflowError),
    ],
)
def test_malformed_inputs_raise_distinct_errors(blob, err):
    with pytest.raises(err):
        decode_tensor(blob)


def test_refuses_nonfinite_and_bad_dtype(tmp_path):
    with pytest.raises(NonFiniteTensorError):
        write_tensor(np.array([np.nan], np.float32), tmp_path / "a.rgtf")
    with pytest.raises(UnsupportedDtypeError):
        write_tensor(np.zeros(3, np.float64), tmp_path / "a.rgtf")
    with pytest.raises(DimsOverflowError):
        write_tensor(np.zeros((1,) * 5, np.uint8), tmp_path / "a.rgtf")


def test_pgm_roundtrip_and_comments(tmp_path):
    lab = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_pgm(lab, tmp_path / "a.pgm")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), lab)
    (tmp_path / "b.pgm").write_bytes(b"P5\n# made by hand\n4 3\n255\n" + lab.tobytes())
    np.testing.assert_array_equal(read_pgm(tmp_path / "b.pgm"), lab)


def test_pgm_errors(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(BadMagicError):
        read_pgm(tmp_path / "a.pgm")
    (tmp_path / "b.pgm").write_bytes(b"P5\n4 4\n255\n" + b"\0" * 3)
    with pytest.raises(TruncatedPayloadError):
        read_pgm(tmp_path / "b.pgm")
    with pytest.raises(ValueError):
        write_pgm(np.full((2, 2), 300), tmp_path / "c.pgm")


def test_rng_streams_are_pure_functions_of_path():
    a = SeededRng(7).derive_path("pool/epoch-3/step-1").generator.random(5)
    b = SeededRng(7).derive("pool").derive("epoch-3").derive("step-1").generator.random(5)
    np.testing.assert_array_equal(a, b)
    c = rng_derive(SeededRng(7), "pool/epoch-3/step-2").generator.random(5)
    assert not np.array_equal(a, c)
    assert not np.array_equal(SeededRng(8).generator.random(3), SeededRng(7).generator.random(3))


def test_deriving_does_not_advance_parent():
    root = SeededRng(1)
    first = root.generator.random()
    root.derive("x").generator.random(100)
    assert SeededRng(1).generator.random() == first


def test_named_tensor_checkpoint(tmp_path):
    tensors = {"W": np.ones((2, 3), np.float32), "mask": np.zeros(4, np.uint8)}
    save_named_tensors(tensors, tmp_path / "ck")
    back = load_named_tensors(tmp_path / "ck")
    assert set(back) == {"W", "mask"}
    np.testing.assert_array_equal(back["W"], tensors["W"])
    assert "W\tfloat32\t2x3" in (tmp_path / "ck" / "manifest.txt").read_text()
