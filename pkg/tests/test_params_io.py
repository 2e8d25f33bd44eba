"""Parameter snapshot format round-trip and corruption handling."""

import struct

import numpy as np
import pytest

from lidarpan import DataError, Param
from lidarpan.params_io import MAGIC, assign_params, load_params, save_params


def test_roundtrip_preserves_order_shapes_values(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "stem.w": Param(rng.normal(size=(4, 2, 3, 3)).astype(np.float32)),
        "stem.b": Param(rng.normal(size=(4,)).astype(np.float32)),
        "head.gamma": Param(rng.normal(size=(7,)).astype(np.float32)),
    }
    path = tmp_path / "snap.lpst"
    save_params(params, path)
    loaded = load_params(path)
    assert list(loaded) == list(params)
    for name, p in params.items():
        assert loaded[name].shape == p.data.shape
        assert np.array_equal(loaded[name], p.data)


def test_header_layout(tmp_path):
    path = tmp_path / "snap.lpst"
    save_params({"w": Param(np.zeros((2, 2), dtype=np.float32))}, path)
    blob = path.read_bytes()
    assert blob[:4] == MAGIC
    assert struct.unpack_from("<I", blob, 4)[0] == 1
    assert struct.unpack_from("<H", blob, 8)[0] == 1  # name length
    assert blob[10:11] == b"w"[:1]


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.lpst"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(DataError):
        load_params(path)


def test_truncation_reported_with_offset(tmp_path):
    path = tmp_path / "snap.lpst"
    save_params({"w": Param(np.ones((3, 3), dtype=np.float32))}, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(DataError) as exc:
        load_params(path)
    assert "offset" in exc.value.details


def test_assign_checks_shapes(tmp_path):
    path = tmp_path / "snap.lpst"
    save_params({"w": Param(np.ones((2, 3), dtype=np.float32))}, path)
    target = {"w": Param(np.zeros((3, 2), dtype=np.float32))}
    with pytest.raises(DataError):
        assign_params(target, load_params(path))
