import struct

import numpy as np
import pytest

from balora import adapters, checkpoint
from balora.errors import CheckpointError


def test_layout_is_little_endian_records():
    blob = checkpoint.encode({"W": np.array([[1.0, 2.0]])})
    assert blob[:4] == b"BALR"
    assert struct.unpack_from("<I", blob, 4) == (1,)
    assert struct.unpack_from("<I", blob, 8) == (1,)
    assert blob[12:13] == b"W"
    assert struct.unpack_from("<II", blob, 13) == (1, 2)
    assert struct.unpack_from("<2d", blob, 21) == (1.0, 2.0)
    assert len(blob) == 21 + 16


def test_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    p = adapters.pissa_init(rng.standard_normal((6, 4)), 2)
    first = tmp_path / "a.balr"
    checkpoint.write_checkpoint(first, checkpoint.adapter_tensors(p), checkpoint.adapter_meta(p))
    tensors, meta = checkpoint.read_checkpoint(first)
    second = tmp_path / "b.balr"
    checkpoint.write_checkpoint(second, tensors, meta)
    assert first.read_bytes() == second.read_bytes()
    assert checkpoint.sidecar_path(first).read_text() == checkpoint.sidecar_path(second).read_text()
    assert meta == {"kind": "pissa", "r": 2, "sigma": None, "alpha": 2.0, "seed": None}
    np.testing.assert_array_equal(tensors["base"], p.base)


def test_vectors_come_back_as_rows(tmp_path):
    path = tmp_path / "v.balr"
    checkpoint.write_checkpoint(path, {"bias": np.arange(3.0)})
    tensors, meta = checkpoint.read_checkpoint(path)
    assert meta is None
    np.testing.assert_array_equal(tensors["bias"], [[0.0, 1.0, 2.0]])


@pytest.mark.parametrize(
    "blob",
    [b"", b"XXXX\x01\x00\x00\x00", b"BALR\x02\x00\x00\x00", b"BALR\x01\x00\x00\x00\x05\x00\x00\x00ab"],
)
def test_malformed(blob):
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob)


def test_truncated_payload():
    blob = checkpoint.encode({"W": np.ones((2, 2))})
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:-3])


def test_rejects_3d():
    with pytest.raises(CheckpointError):
        checkpoint.encode({"T": np.ones((2, 2, 2))})
