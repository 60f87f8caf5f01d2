"""STVC container format round trips and error handling."""

import numpy as np
import pytest

from statm import container as C
from statm.errors import ConfigurationError


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a/b": rng.normal(size=(3, 4)).astype(np.float32),
        "mask": rng.integers(0, 5, size=(2, 2)).astype(np.int32),
        "bytes": rng.integers(0, 255, size=(7,)).astype(np.uint8),
    }
    path = tmp_path / "t.stvc"
    C.save_container(path, tensors)
    back = C.load_container(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert back[k].tobytes() == tensors[k].tobytes()


def test_rewrite_is_byte_identical(tmp_path):
    tensors = {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}
    p1, p2 = tmp_path / "a.stvc", tmp_path / "b.stvc"
    C.save_container(p1, tensors)
    C.save_container(p2, tensors)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_container_is_twelve_bytes(tmp_path):
    path = tmp_path / "empty.stvc"
    C.save_container(path, {})
    data = path.read_bytes()
    assert len(data) == 12
    assert data[:4] == b"STVC"
    assert C.load_container(path) == {}


def test_corrupted_magic_is_format_error(tmp_path):
    path = tmp_path / "bad.stvc"
    C.save_container(path, {"x": np.zeros(2, np.float32)})
    raw = bytearray(path.read_bytes())
    raw[0] = ord(b"X")
    path.write_bytes(bytes(raw))
    with pytest.raises(ConfigurationError, match="magic"):
        C.load_container(path)


def test_truncated_payload_is_format_error(tmp_path):
    path = tmp_path / "trunc.stvc"
    C.save_container(path, {"x": np.zeros((4, 4), np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ConfigurationError):
        C.load_container(path)


def test_float64_saved_as_f32(tmp_path):
    path = tmp_path / "f.stvc"
    C.save_container(path, {"x": np.array([1.5, 2.5], dtype=np.float64)})
    back = C.load_container(path)
    assert back["x"].dtype == np.float32
    assert np.array_equal(back["x"], [1.5, 2.5])


def test_scalar_rank_zero_round_trip(tmp_path):
    path = tmp_path / "s.stvc"
    C.save_container(path, {"step": np.array(7, dtype=np.int32)})
    back = C.load_container(path)
    assert back["step"].shape == ()
    assert int(back["step"]) == 7
