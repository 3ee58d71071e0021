"""Tensor container format shared by base weights, adapter pools and deployment packages.

Layout::

    b"CRYT" | u32 format_version | u64 manifest_len | manifest (UTF-8 JSON) | blob

The manifest lists ``{name, shape, dtype, byte_offset, nbytes}`` for every
tensor (offsets relative to the blob start) plus a free-form ``config``
section and the SHA-256 of the blob. Values are little-endian IEEE-754.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CRYT"
FORMAT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}
_REVERSE = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64", np.dtype("<i8"): "i64"}


class TensorFileError(ValueError):
    pass


class CorruptFileError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


def tensors_checksum(tensors: dict[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes, dtypes and raw bytes, in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.dtype.str.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def dumps(tensors: dict[str, np.ndarray], config: dict | None = None) -> bytes:
    entries = []
    blob = io.BytesIO()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt not in _REVERSE:
            raise TensorFileError(f"unsupported dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": _REVERSE[dt],
            "byte_offset": blob.tell(),
            "nbytes": len(raw),
        })
        blob.write(raw)
    data = blob.getvalue()
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "tensors": entries,
        "blob_sha256": hashlib.sha256(data).hexdigest(),
        "blob_len": len(data),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + data


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a container; returns (tensors, config). Never returns partial results."""
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CorruptFileError("missing tensor-file magic")
    version, mlen = struct.unpack("<IQ", buf[4:16])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format_version {version}, expected {FORMAT_VERSION}")
    if 16 + mlen > len(buf):
        raise CorruptFileError("manifest truncated")
    try:
        manifest = json.loads(buf[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable manifest: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"manifest format_version {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    blob = buf[16 + mlen:]
    if len(blob) != manifest.get("blob_len"):
        raise CorruptFileError(f"blob is {len(blob)} bytes, manifest declares {manifest.get('blob_len')}")
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise CorruptFileError("blob checksum mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dt.itemsize != e["nbytes"]:
            raise CorruptFileError(f"tensor {e['name']}: shape {e['shape']} disagrees with nbytes")
        start = e["byte_offset"]
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=start).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return tensors, manifest["config"]


def save(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    # write-then-rename so an interrupted save never leaves a half file behind
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors, config))
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
