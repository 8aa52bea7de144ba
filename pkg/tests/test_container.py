import numpy as np
import pytest

from ctdenoise.container import ContainerError, load_arrays, save_arrays


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "net.weight": rng.standard_normal((3, 4, 5)).astype(np.float32),
        "net.bias": rng.standard_normal(7).astype(np.float32),
        "meta.step": np.array([42.0], dtype=np.float32),
    }
    path = tmp_path / "x.ckpt"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert loaded[name].shape == arrays[name].shape
        assert np.array_equal(loaded[name], arrays[name])


def test_bytes_independent_of_insertion_order(tmp_path):
    a = np.ones((2, 2), dtype=np.float32)
    b = np.zeros(3, dtype=np.float32)
    save_arrays(tmp_path / "ab.ckpt", {"a": a, "b": b})
    save_arrays(tmp_path / "ba.ckpt", {"b": b, "a": a})
    assert (tmp_path / "ab.ckpt").read_bytes() == (tmp_path / "ba.ckpt").read_bytes()


def test_rejects_non_float32(tmp_path):
    with pytest.raises(TypeError):
        save_arrays(tmp_path / "x.ckpt", {"a": np.zeros(3, dtype=np.float64)})


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(ContainerError):
        load_arrays(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "x.ckpt"
    save_arrays(path, {"a": np.ones(10, dtype=np.float32)})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ContainerError):
        load_arrays(path)
