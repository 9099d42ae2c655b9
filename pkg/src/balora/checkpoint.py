"""Binary tensor checkpoints with a JSON metadata sidecar.

Layout (little-endian)::

    b"BALR" | version u32 | records...
    record := name_len u32 | name utf-8 | rows u32 | cols u32 | rows*cols f64 (row-major)

Records run to end of file. 1-D arrays are stored as a single row and come
back as ``(1, n)``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from balora.errors import CheckpointError

MAGIC = b"BALR"
VERSION = 1


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise CheckpointError(f"tensor {name!r} must be 1-D or 2-D, got shape {arr.shape}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError("not a BALR checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CheckpointError("truncated tensor name")
            pos += nlen
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            nbytes = rows * cols * 8
            if pos + nbytes > len(data):
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos)
            out[name] = arr.astype(np.float64).reshape(rows, cols)
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return out


def write_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode(tensors))
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    tensors = decode(data)
    side = sidecar_path(path)
    meta = None
    if side.exists():
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"bad sidecar {side}: {exc}") from exc
    return tensors, meta


def adapter_tensors(p) -> dict[str, np.ndarray]:
    return {"a": p.a, "b": p.b, "base": p.base}


def adapter_meta(p) -> dict:
    return {"kind": p.kind, "r": p.r, "sigma": p.sigma, "alpha": p.alpha, "seed": p.seed}
