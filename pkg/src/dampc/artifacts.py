"""Deterministic on-disk container for models, metric fields, and datasets.

Layout: 8-byte magic, big-endian uint64 header length, UTF-8 JSON header,
then raw little-endian array payloads back to back.  The header carries a
schema name/version, a config hash, free-form metadata, and a manifest of
(name, dtype, shape, offset) for each array.  Identical content produces
identical bytes, so round-trip tests can compare files directly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactError

_MAGIC = b"DAMPC\x00v1"


def config_hash(cfg: dict) -> str:
    """Stable hash of a JSON-compatible config dict."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_arrays(path, schema: str, version: int, meta: dict, arrays: dict) -> None:
    """Write arrays plus metadata to path deterministically."""
    path = Path(path)
    manifest = []
    payloads = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        buf = arr.tobytes()
        manifest.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
        })
        payloads.append(buf)
        offset += len(buf)
    header = {
        "schema": schema,
        "version": version,
        "meta": meta,
        "arrays": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(">Q", len(head)))
        fh.write(head)
        for buf in payloads:
            fh.write(buf)


def load_arrays(path, schema: str, version: int):
    """Read (meta, arrays) from path, validating schema name and version."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"artifact not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ArtifactError(f"bad magic in {path}")
        (head_len,) = struct.unpack(">Q", fh.read(8))
        header = json.loads(fh.read(head_len).decode())
        if header.get("schema") != schema:
            raise ArtifactError(
                f"{path}: expected schema {schema!r}, found {header.get('schema')!r}")
        if header.get("version") != version:
            raise ArtifactError(
                f"{path}: schema version {header.get('version')} != expected {version}")
        blob = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return header["meta"], arrays
