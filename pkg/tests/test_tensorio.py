import numpy as np
import pytest

from crayon import tensorio


def _tensors():
    rng = np.random.default_rng(0)
    return {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5).astype(np.float32),
            "c": np.arange(6, dtype=np.int64).reshape(2, 3)}


def test_round_trip_is_bit_exact(tmp_path):
    t = _tensors()
    tensorio.save(tmp_path / "x.bin", t, {"kind": "demo", "n": 3})
    back, cfg = tensorio.load(tmp_path / "x.bin")
    assert cfg["kind"] == "demo" and cfg["n"] == 3
    for k, v in t.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    assert tensorio.tensors_checksum(back) == tensorio.tensors_checksum(t)


def test_dumps_is_deterministic():
    assert tensorio.dumps(_tensors(), {"k": 1}) == tensorio.dumps(_tensors(), {"k": 1})


def test_truncated_and_corrupted_blobs_are_rejected():
    buf = tensorio.dumps(_tensors(), {})
    with pytest.raises(tensorio.CorruptFileError):
        tensorio.loads(buf[:-7])
    flipped = bytearray(buf)
    flipped[-3] ^= 0xFF
    with pytest.raises(tensorio.CorruptFileError):
        tensorio.loads(bytes(flipped))
    with pytest.raises(tensorio.TensorFileError):
        tensorio.loads(b"NOPE" + buf[4:])


def test_version_mismatch():
    buf = bytearray(tensorio.dumps(_tensors(), {}))
    buf[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(tensorio.VersionMismatchError):
        tensorio.loads(bytes(buf))
