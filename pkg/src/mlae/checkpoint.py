"""Checkpoint format: a JSON manifest plus one little-endian binary blob.

A checkpoint is a directory holding ``manifest.json`` and ``tensors.bin``.
Every tensor starts on a 64-byte boundary; the gap after it is zero padding.
The manifest records format version, free-form metadata (the run config
echo), a tensor index and the SHA-256 of the blob, which is verified on load.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, FormatError

FORMAT_VERSION = 1
ALIGN = 64
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


def aligned(nbytes: int) -> int:
    return -(-nbytes // ALIGN) * ALIGN


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> dict:
    """Write ``tensors`` (cast to float32 unless integer) and return the manifest."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = "int32" if np.issubdtype(arr.dtype, np.integer) else "float32"
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                      "offset": offset, "byte_length": len(raw)})
        pad = aligned(len(raw)) - len(raw)
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    blob = b"".join(chunks)
    manifest = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": index,
                "blob_bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()}
    (out / BLOB).write_bytes(blob)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> dict:
    p = Path(path) / MANIFEST
    if not p.is_file():
        raise FormatError(f"no checkpoint manifest at {p}")
    try:
        manifest = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{p}: {err}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{p}: unsupported format version {manifest.get('format_version')!r}")
    for key in ("tensors", "sha256", "meta"):
        if key not in manifest:
            raise FormatError(f"{p}: missing {key!r}")
    return manifest


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, manifest)``; raise CorruptCheckpointError on hash mismatch."""
    manifest = read_manifest(path)
    blob_path = Path(path) / BLOB
    if not blob_path.is_file():
        raise FormatError(f"missing blob {blob_path}")
    blob = blob_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CorruptCheckpointError(f"{blob_path}: content hash does not match manifest")
    tensors = {}
    for entry in manifest["tensors"]:
        try:
            dtype = DTYPES[entry["dtype"]]
            start, n = int(entry["offset"]), int(entry["byte_length"])
            shape = tuple(entry["shape"])
        except (KeyError, TypeError, ValueError) as err:
            raise FormatError(f"bad tensor index entry {entry!r}: {err}") from None
        if start % ALIGN or start + n > len(blob) or n != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise FormatError(f"tensor {entry.get('name')!r} has an inconsistent extent")
        tensors[entry["name"]] = np.frombuffer(blob, dtype=dtype, count=n // dtype.itemsize,
                                               offset=start).reshape(shape)
    return tensors, manifest


def tensor_bytes(manifest: dict, names=None, padded: bool = True) -> int:
    """Bytes the named tensors occupy in the blob (all tensors if ``names`` is None)."""
    total = 0
    for entry in manifest["tensors"]:
        if names is None or entry["name"] in names:
            total += aligned(entry["byte_length"]) if padded else entry["byte_length"]
    return total
