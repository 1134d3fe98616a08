"""CTF tensor file format and checkpoint directories."""
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stinterp.ctf import (
    BadMagicError,
    CheckpointMismatchError,
    ExtentOverflowError,
    InvalidHeaderError,
    TruncatedPayloadError,
    apply_checkpoint,
    load_checkpoint,
    read_ctf,
    save_checkpoint,
    write_ctf,
)
from stinterp.params import ModelParams


def test_round_trip_is_bit_exact(tmp_path, rng):
    arr = rng.random(size=(8, 16, 16))
    write_ctf(tmp_path / "x.ctf", arr)
    back = read_ctf(tmp_path / "x.ctf")
    assert back.dtype == np.float64
    assert np.array_equal(back, arr)


def test_float32_round_trip(tmp_path, rng):
    arr = rng.random(size=(3, 4)).astype(np.float32)
    write_ctf(tmp_path / "x.ctf", arr)
    back = read_ctf(tmp_path / "x.ctf")
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


@given(dtype=st.sampled_from([np.float32, np.float64]),
       shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
       seed=st.integers(0, 2**31 - 1))
def test_round_trip_property(tmp_path_factory, dtype, shape, seed):
    arr = np.random.default_rng(seed).random(size=shape).astype(dtype)
    path = tmp_path_factory.mktemp("ctf") / "t.ctf"
    write_ctf(path, arr)
    back = read_ctf(path)
    assert back.dtype == dtype and np.array_equal(back, arr)


def test_header_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_ctf(tmp_path / "x.ctf", arr)
    raw = (tmp_path / "x.ctf").read_bytes()
    assert raw[:4] == b"CTF1"
    assert raw[4] == 0  # f32 code
    assert raw[5] == 2  # ndim
    assert struct.unpack("<2I", raw[6:14]) == (2, 3)
    assert np.frombuffer(raw[14:], dtype="<f4").tolist() == arr.ravel().tolist()


def test_bad_magic(tmp_path):
    (tmp_path / "bad.ctf").write_bytes(b"XXXX" + bytes(32))
    with pytest.raises(BadMagicError):
        read_ctf(tmp_path / "bad.ctf")


def test_truncated_payload(tmp_path, rng):
    arr = rng.random(size=(4, 4))
    write_ctf(tmp_path / "x.ctf", arr)
    raw = (tmp_path / "x.ctf").read_bytes()
    (tmp_path / "cut.ctf").write_bytes(raw[:-8])
    with pytest.raises(TruncatedPayloadError):
        read_ctf(tmp_path / "cut.ctf")


def test_extent_overflow(tmp_path):
    header = b"CTF1" + bytes([1, 2]) + struct.pack("<2I", 2**31 - 1, 2**31 - 1)
    (tmp_path / "huge.ctf").write_bytes(header)
    with pytest.raises(ExtentOverflowError):
        read_ctf(tmp_path / "huge.ctf")


def test_zero_extent_rejected(tmp_path):
    header = b"CTF1" + bytes([0, 1]) + struct.pack("<I", 0)
    (tmp_path / "zero.ctf").write_bytes(header)
    with pytest.raises(InvalidHeaderError):
        read_ctf(tmp_path / "zero.ctf")


def test_unknown_dtype_code(tmp_path):
    header = b"CTF1" + bytes([9, 1]) + struct.pack("<I", 1) + bytes(8)
    (tmp_path / "odd.ctf").write_bytes(header)
    with pytest.raises(InvalidHeaderError):
        read_ctf(tmp_path / "odd.ctf")


def test_error_codes_are_distinct():
    codes = {BadMagicError.code, TruncatedPayloadError.code, ExtentOverflowError.code,
             InvalidHeaderError.code}
    assert len(codes) == 4


class TestCheckpoint:
    def _params(self, rng):
        params = ModelParams()
        params.create("block.conv.weight", rng.normal(size=(2, 3)).astype(np.float32))
        params.create("block.conv.bias", rng.normal(size=(2,)).astype(np.float32))
        params.create("head.weight", rng.normal(size=(4,)).astype(np.float32))
        return params

    def test_round_trip(self, tmp_path, rng):
        params = self._params(rng)
        save_checkpoint(tmp_path / "ck", params, step=17, model_meta={"genes": 8})
        # one CTF file per parameter, path with '.' -> '/'
        assert (tmp_path / "ck" / "block" / "conv" / "weight").exists()
        arrays, step, meta = load_checkpoint(tmp_path / "ck")
        assert step == 17 and meta == {"genes": 8}
        fresh = self._params(np.random.default_rng(99))
        apply_checkpoint(fresh, arrays)
        for path, t in params.items():
            assert np.array_equal(fresh[path].data, t.data)

    def test_shape_mismatch_reports_first_path(self, tmp_path, rng):
        params = self._params(rng)
        save_checkpoint(tmp_path / "ck", params, step=1)
        arrays, _, _ = load_checkpoint(tmp_path / "ck")
        other = ModelParams()
        other.create("block.conv.weight", np.zeros((9, 9), dtype=np.float32))
        other.create("block.conv.bias", np.zeros(2, dtype=np.float32))
        other.create("head.weight", np.zeros(4, dtype=np.float32))
        with pytest.raises(CheckpointMismatchError) as exc:
            apply_checkpoint(other, arrays)
        assert exc.value.path == "block.conv.weight"

    def test_missing_parameter_rejected(self, tmp_path, rng):
        params = self._params(rng)
        save_checkpoint(tmp_path / "ck", params, step=1)
        arrays, _, _ = load_checkpoint(tmp_path / "ck")
        del arrays["head.weight"]
        with pytest.raises(CheckpointMismatchError, match="head.weight"):
            apply_checkpoint(params, arrays)
