"""BST1 tensor files, the small JSON tensor form, and atomic file writes.

BST1 layout (all little-endian)::

    b"BST1" | version u8 = 1 | dtype u8 = 1 (float32) | rank u8 | pad u8 = 0
    | rank x u32 dims | prod(dims) x float32, row-major
"""
from __future__ import annotations

import contextlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"BST1"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sBBBB")


def encode_bst(array):
    a = np.asarray(array)
    if a.ndim < 1 or a.ndim > 255:
        raise FormatError(f"BST1 supports rank 1..255, got rank {a.ndim}")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, a.ndim, 0)
    dims = struct.pack(f"<{a.ndim}I", *a.shape)
    payload = np.ascontiguousarray(a, dtype="<f4").tobytes()
    return header + dims + payload


def decode_bst(buf, path=None):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated BST1 header", path)
    magic, version, dtype, rank, pad = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", path)
    if version != VERSION:
        raise FormatError(f"unsupported BST1 version {version}", path)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", path)
    if pad != 0:
        raise FormatError("nonzero pad byte", path)
    if rank < 1:
        raise FormatError("rank must be >= 1", path)
    off = _HEADER.size + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated dims", path)
    dims = struct.unpack_from(f"<{rank}I", buf, _HEADER.size)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != 4 * count:
        raise FormatError(f"payload is {len(buf) - off} bytes, dims {dims} need {4 * count}", path)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def write_bst(path, array):
    atomic_write_bytes(path, encode_bst(array))


def read_bst(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror}", path) from exc
    return decode_bst(buf, path)


def tensor_to_json(array):
    a = np.asarray(array, dtype=np.float32)
    return {"dims": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}


def tensor_from_json(obj, path=None):
    try:
        dims = [int(d) for d in obj["dims"]]
        data = np.asarray(obj["data"], dtype=np.float32)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad JSON tensor: {exc}", path) from exc
    if data.ndim != 1 or data.size != int(np.prod(dims)):
        raise FormatError(f"JSON tensor has {data.size} values for dims {dims}", path)
    return data.reshape(dims)


def read_tensor(path):
    """Read a BST1 file, or the JSON tensor form when the suffix is .json."""
    path = Path(path)
    if path.suffix == ".json":
        try:
            obj = json.loads(path.read_text())
        except OSError as exc:
            raise FormatError(f"cannot read: {exc.strerror}", path) from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from exc
        return tensor_from_json(obj, path)
    return read_bst(path)


def dumps_json(obj):
    """Canonical JSON text: sorted keys, 2-space indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def atomic_write_bytes(path, data):
    """Write via a sibling temp file and rename, so failures leave no partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))
