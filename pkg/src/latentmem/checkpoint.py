"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic   8 bytes  b"LATMEMCK"
    version u32
    count   u32
    count x { name_len u32, name utf-8, ndim u32, dims u64*ndim, values f64*prod(dims) }

Entries are written in sorted-name order so identical parameters give
identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"LATMEMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def dumps(params: Mapping[str, object]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params)))
    for name in sorted(params):
        arr = np.array(_as_array(params[name]), dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    try:
        return _loads(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def _loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        out[name] = arr.astype(np.float64)
    if off != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, params: Mapping[str, object]) -> str:
    """Write ``params`` to ``path``; returns the sha256 of the file contents."""
    blob = dumps(params)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def digest(params: Mapping[str, object]) -> str:
    return hashlib.sha256(dumps(params)).hexdigest()


def select(params: Mapping[str, object], prefix: str) -> dict[str, object]:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def assign(params: Mapping[str, Tensor], values: Mapping[str, np.ndarray], strict: bool = True) -> None:
    """Copy ``values`` into the matching tensors of ``params``."""
    if strict:
        missing = set(params) - set(values)
        if missing:
            raise CheckpointError(f"checkpoint lacks {sorted(missing)[:5]}")
    for name, arr in values.items():
        if name not in params:
            if strict:
                raise CheckpointError(f"unexpected entry {name!r}")
            continue
        if params[name].shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {params[name].shape}")
        params[name].data = np.array(arr, dtype=np.float64)
