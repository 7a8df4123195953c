"""Single-file checkpoint container.

Layout::

    b"RASDCKPT" | u32 format version | u64 manifest length | manifest JSON | raw arrays

The manifest lists every array (name, dtype, shape, byte offset, sha256) plus
free-form metadata; arrays are stored little-endian, back to back. A sha256
over the manifest and payload guards the whole file.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RASDCKPT"
FORMAT_VERSION = 1


class IntegrityError(RuntimeError):
    pass


class VersionError(RuntimeError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def write_container(path, arrays: dict, meta: dict, version: int = FORMAT_VERSION):
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = _le(np.asarray(arrays[name]))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw),
                        "sha256": hashlib.sha256(raw).hexdigest()})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {"arrays": entries, "meta": meta}
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    digest = hashlib.sha256(body + payload).hexdigest()
    manifest["sha256"] = digest
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    blob = MAGIC + struct.pack("<IQ", version, len(head)) + head + payload
    Path(path).write_bytes(blob)


def read_container(path) -> tuple[dict, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, n_head = struct.unpack("<IQ", blob[8:20])
    except struct.error as exc:
        raise IntegrityError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    try:
        manifest = json.loads(blob[20:20 + n_head])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt manifest") from exc
    payload = blob[20 + n_head:]
    expected = manifest.pop("sha256", None)
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    if hashlib.sha256(body + payload).hexdigest() != expected:
        raise IntegrityError(f"{path}: checksum mismatch")
    arrays = {}
    for e in manifest["arrays"]:
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise IntegrityError(f"{path}: checksum mismatch in array {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]
