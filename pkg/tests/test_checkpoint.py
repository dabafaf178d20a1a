import struct

import numpy as np
import pytest

from cmreg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "scalarish": rng.normal(size=(1,)),
        "vec": rng.normal(size=(7,)),
        "mat": rng.normal(size=(5, 3)),
        "cube": rng.normal(size=(2, 3, 4)),
        "weird/name.w1": rng.normal(size=(4, 4)) * 1e300,
        "tiny": np.array([5e-324, -0.0, np.pi]),
    }
    path = tmp_path / "model.cmig"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        got = loaded[name]
        assert got.dtype == np.float64
        assert got.shape == arr.shape
        assert np.array_equal(got.view(np.uint64), np.asarray(arr).view(np.uint64))


def test_header_layout(tmp_path):
    path = tmp_path / "one.cmig"
    save_checkpoint(path, {"ab": np.array([1.5, -2.0])})
    blob = path.read_bytes()
    assert blob[:4] == b"CMIG"
    version, count = struct.unpack("<II", blob[4:12])
    assert version == 1 and count == 1
    (name_len,) = struct.unpack("<H", blob[12:14])
    assert name_len == 2 and blob[14:16] == b"ab"
    assert blob[16] == 1  # rank
    (dim,) = struct.unpack("<Q", blob[17:25])
    assert dim == 2
    assert np.frombuffer(blob[25:], dtype="<f8").tolist() == [1.5, -2.0]


def test_unicode_names(tmp_path):
    path = tmp_path / "u.cmig"
    tensors = {"péso.w": np.ones((2, 2))}
    save_checkpoint(path, tensors)
    assert list(load_checkpoint(path)) == ["péso.w"]


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.cmig"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "trunc.cmig"
    save_checkpoint(path, {"w": np.ones((4, 4))})
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bad_version(tmp_path):
    path = tmp_path / "v9.cmig"
    save_checkpoint(path, {"w": np.ones(2)})
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
