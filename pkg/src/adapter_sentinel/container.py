"""Named-tensor container files.

Layout::

    MAGIC (8 bytes) | UTF-8 JSON header | b"\\0" | blob_0 | blob_1 | ...

The header carries free-form fields plus a ``tensors`` directory of
``{"name", "shape", "offset", "nbytes"}`` entries; offsets are relative to the
first byte after the separator. Blobs are little-endian float32, row-major,
in directory order.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"ADSNTL01"
_DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


def encode(header: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    directory, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr), dtype=_DTYPE)
        raw = a.tobytes()
        directory.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = dict(header)
    head["tensors"] = directory
    text = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if b"\0" in text:
        raise FormatError("header may not contain NUL bytes")
    return MAGIC + text + b"\0" + b"".join(blobs)


def decode(buf: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if buf[:len(MAGIC)] != MAGIC:
        raise FormatError("bad magic bytes", 0)
    sep = buf.find(b"\0", len(MAGIC))
    if sep < 0:
        raise FormatError("missing header terminator", len(MAGIC))
    try:
        header = json.loads(buf[len(MAGIC):sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}", len(MAGIC)) from exc
    directory = header.pop("tensors", None)
    if not isinstance(directory, list):
        raise FormatError("header has no tensor directory", len(MAGIC))
    start = sep + 1
    body = len(buf) - start
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for entry in directory:
        try:
            name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
            off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed directory entry {entry!r}", len(MAGIC)) from exc
        if off != expected or nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize:
            raise FormatError(f"tensor {name!r} has inconsistent offset/size", start + off)
        if off + nbytes > body:
            raise FormatError(f"truncated blob for tensor {name!r}", start + body)
        tensors[name] = np.frombuffer(buf, _DTYPE, count=nbytes // 4, offset=start + off) \
            .reshape(shape).astype(np.float32)
        expected = off + nbytes
    if expected != body:
        raise FormatError(f"tensor count mismatch: {body - expected} trailing bytes", start + expected)
    return header, tensors


def write(path: str | os.PathLike, header: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    """Write atomically (temp file + rename) so interrupted runs leave no partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(header, tensors))
    os.replace(tmp, path)


def read(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
