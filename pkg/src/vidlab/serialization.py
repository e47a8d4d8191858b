"""Named-tensor container used for checkpoints, adapters, and raw videos.

File layout: an 8-byte little-endian unsigned header length, then a UTF-8
JSON header mapping tensor name -> {"dtype": "f32", "shape": [...],
"byte_offset": ...}, then the contiguous little-endian float32 blobs.
Free-form metadata lives under the reserved "__meta__" header key.
Writes are atomic (temp file + rename) so concurrent readers never see a
half-written artifact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

META_KEY = "__meta__"
_HEADER_LEN_BYTES = 8


class CorruptArtifactError(Exception):
    """Raised when a tensor container fails structural validation."""


def _as_f32_array(name: str, tensor) -> np.ndarray:
    if isinstance(tensor, torch.Tensor):
        if tensor.dtype != torch.float32:
            raise ValueError(
                f"tensor {name!r} has dtype {tensor.dtype}; the container format "
                "is float32-only (cast explicitly if lossy conversion is intended)"
            )
        arr = tensor.detach().cpu().contiguous().numpy()
    else:
        arr = np.asarray(tensor)
        if arr.dtype != np.float32:
            raise ValueError(
                f"tensor {name!r} has dtype {arr.dtype}; the container format is float32-only"
            )
    # ascontiguousarray promotes 0-d arrays to 1-d; restore the true shape
    return np.ascontiguousarray(arr).reshape(arr.shape)


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor | np.ndarray],
                 meta: dict | None = None) -> None:
    """Write a named-tensor container. Tensor order in the blob region is
    sorted by name so identical state always produces identical bytes."""
    if META_KEY in tensors:
        raise ValueError(f"{META_KEY!r} is reserved for metadata")

    arrays: Dict[str, np.ndarray] = {}
    header: Dict[str, dict] = {}
    offset = 0
    for name in sorted(tensors):
        arr = _as_f32_array(name, tensors[name])
        arrays[name] = arr
        header[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "byte_offset": offset,
        }
        offset += arr.nbytes
    if meta is not None:
        header[META_KEY] = meta

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = os.fspath(path)
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-", suffix=".vt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for name in sorted(arrays):
                data = arrays[name]
                if data.dtype.byteorder not in ("<", "=", "|") or not _little_endian_native():
                    data = data.astype("<f4")
                fh.write(data.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _little_endian_native() -> bool:
    return np.dtype(np.float32).newbyteorder("=").str.startswith("<")


def load_tensors(path: str | os.PathLike) -> Tuple[Dict[str, torch.Tensor], dict]:
    """Load a container written by :func:`save_tensors`.

    Returns (tensors, meta). Raises :class:`CorruptArtifactError` on any
    structural defect: short header, undecodable JSON, unknown dtype, or a
    blob region that does not cover every declared tensor.
    """
    with open(path, "rb") as fh:
        raw = fh.read()

    if len(raw) < _HEADER_LEN_BYTES:
        raise CorruptArtifactError(f"{path}: file shorter than the 8-byte header length")
    (header_len,) = struct.unpack("<Q", raw[:_HEADER_LEN_BYTES])
    if header_len > len(raw) - _HEADER_LEN_BYTES:
        raise CorruptArtifactError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[_HEADER_LEN_BYTES:_HEADER_LEN_BYTES + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArtifactError(f"{path}: undecodable JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise CorruptArtifactError(f"{path}: header is not a JSON object")

    meta = header.pop(META_KEY, {})
    blob = raw[_HEADER_LEN_BYTES + header_len:]

    tensors: Dict[str, torch.Tensor] = {}
    for name, entry in header.items():
        if not isinstance(entry, dict) or {"dtype", "shape", "byte_offset"} - entry.keys():
            raise CorruptArtifactError(f"{path}: malformed header entry for {name!r}")
        if entry["dtype"] != "f32":
            raise CorruptArtifactError(
                f"{path}: tensor {name!r} has unsupported dtype {entry['dtype']!r}"
            )
        shape = entry["shape"]
        if not isinstance(shape, list) or any(not isinstance(s, int) or s < 0 for s in shape):
            raise CorruptArtifactError(f"{path}: tensor {name!r} has invalid shape {shape!r}")
        start = entry["byte_offset"]
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if not isinstance(start, int) or start < 0 or start + nbytes > len(blob):
            raise CorruptArtifactError(
                f"{path}: tensor {name!r} blob [{start}, {start + nbytes}) is truncated "
                f"(blob region has {len(blob)} bytes)"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32, copy=True))
    return tensors, meta


def file_sha256(path: str | os.PathLike) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
