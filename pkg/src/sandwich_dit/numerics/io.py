"""S2TN binary tensor files and checkpoint directories.

Layout (little-endian): ``b"S2TN"``, u8 version (=1), u8 dtype tag (0=f32, 1=f64),
u32 rank, ``rank`` x u64 dims, then the row-major payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"S2TN"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
MANIFEST = "manifest.json"


class TensorFormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _DTYPE_TAGS:
        raise TensorFormatError(f"S2TN stores float32/float64 only, got {arr.dtype}")
    header = MAGIC + struct.pack("<BBI", VERSION, _DTYPE_TAGS[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.asarray(arr, dtype=arr.dtype.newbyteorder("<"), order="C").tobytes()


def read_tensor_from(stream: BinaryIO) -> np.ndarray:
    head = stream.read(10)
    if len(head) < 10 or head[:4] != MAGIC:
        raise TensorFormatError("missing S2TN magic")
    version, tag, rank = struct.unpack("<BBI", head[4:])
    if version != VERSION:
        raise TensorFormatError(f"unsupported S2TN version {version}")
    if tag not in _TAG_DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    dims_raw = stream.read(8 * rank)
    if len(dims_raw) != 8 * rank:
        raise TensorFormatError("truncated S2TN dims")
    shape = struct.unpack(f"<{rank}Q", dims_raw)
    dtype = _TAG_DTYPES[tag].newbyteorder("<")
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise TensorFormatError("truncated S2TN payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(_TAG_DTYPES[tag])


def decode_tensor(buf: bytes) -> np.ndarray:
    import io

    return read_tensor_from(io.BytesIO(buf))


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor_from(fh)


def save_checkpoint(directory, arrays: dict[str, np.ndarray]) -> Path:
    """Write one S2TN file per named array plus ``manifest.json`` mapping name to file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for i, (name, arr) in enumerate(sorted(arrays.items())):
        fname = f"{i:04d}.s2tn"
        save_tensor(directory / fname, np.asarray(arr))
        manifest[name] = fname
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps({"format": "S2TN", "tensors": manifest}, indent=2, sort_keys=True))
    os.replace(tmp, directory / MANIFEST)
    return directory


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    return {name: load_tensor(directory / fname) for name, fname in manifest["tensors"].items()}
