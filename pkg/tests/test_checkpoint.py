import numpy as np
import pytest

from stageflow.checkpoint import (
    MAGIC,
    load_checkpoint,
    load_tensors,
    manifest_to_tensor,
    save_checkpoint,
    save_tensors,
    tensor_to_manifest,
)


def test_tensor_container_bit_exact_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.normal(size=(3, 4, 2)),
        "b": rng.normal(size=(7,)) * 1e-300,
        "scalar": np.array(np.pi),
        "empty_axis": np.zeros((0, 5)),
    }
    path = tmp_path / "t.rvpk"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert loaded[name].shape == tensors[name].shape
        assert np.array_equal(loaded[name], tensors[name], equal_nan=True)
        assert loaded[name].tobytes() == tensors[name].tobytes()


def test_container_magic(tmp_path):
    path = tmp_path / "t.rvpk"
    save_tensors(path, {"x": np.ones(2)})
    assert path.read_bytes()[:4] == MAGIC == b"RVPK"


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.rvpk"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_tensors(path)


def test_truncated_container_rejected(tmp_path):
    path = tmp_path / "t.rvpk"
    save_tensors(path, {"x": np.ones(4)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_tensors(path)


def test_manifest_encoding_exact():
    manifest = {"vocab": ["a", "b"], "n": 3, "f": 0.125, "nested": {"k": True}}
    assert tensor_to_manifest(manifest_to_tensor(manifest)) == manifest


def test_checkpoint_with_manifest(tmp_path):
    path = tmp_path / "c.rvpk"
    tensors = {"w": np.arange(6.0).reshape(2, 3)}
    save_checkpoint(path, tensors, {"kind": "test", "tag": 1})
    loaded, manifest = load_checkpoint(path)
    assert manifest == {"kind": "test", "tag": 1}
    assert np.array_equal(loaded["w"], tensors["w"])


def test_checkpoint_without_manifest_rejected(tmp_path):
    path = tmp_path / "c.rvpk"
    save_tensors(path, {"w": np.ones(1)})
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_double_save_is_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"w": rng.normal(size=(5, 5)), "v": rng.normal(size=(2,))}
    p1, p2 = tmp_path / "a.rvpk", tmp_path / "b.rvpk"
    save_checkpoint(p1, tensors, {"m": 1})
    save_checkpoint(p2, tensors, {"m": 1})
    assert p1.read_bytes() == p2.read_bytes()
