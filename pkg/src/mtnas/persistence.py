"""Binary container used by checkpoints and dataset dumps.

Layout: 8-byte magic, little-endian uint64 manifest length, the manifest as
UTF-8 JSON (sorted keys), then every array as contiguous little-endian
float64 at the offset the manifest records (relative to the data start).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from mtnas.errors import PersistenceError

CONTAINER_VERSION = 1


def write_container(path, magic: bytes, manifest: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    head = dict(manifest)
    head["container_version"] = CONTAINER_VERSION
    head["arrays"] = entries
    head["data_bytes"] = offset
    text = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for b in blobs:
            fh.write(b)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise PersistenceError(f"{path}: bad magic header {raw[:8]!r}, expected {magic!r}")
    if len(raw) < 16:
        raise PersistenceError(f"{path}: truncated header")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + mlen > len(raw):
        raise PersistenceError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PersistenceError(f"{path}: unreadable manifest") from exc
    if manifest.get("container_version") != CONTAINER_VERSION:
        raise PersistenceError(f"{path}: container version {manifest.get('container_version')} "
                               f"is not {CONTAINER_VERSION}")
    data = raw[16 + mlen:]
    if len(data) != manifest.get("data_bytes"):
        raise PersistenceError(f"{path}: expected {manifest.get('data_bytes')} data bytes, found {len(data)}")
    arrays = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(data):
            raise PersistenceError(f"{path}: array {e['name']} runs past end of file")
        arrays[e["name"]] = np.frombuffer(data[e["offset"]:end], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return manifest, arrays
