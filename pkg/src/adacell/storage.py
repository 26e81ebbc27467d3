"""Deterministic artifact files: array bundles, canonical JSON, digests.

Every writer here produces bytes that depend only on the payload, so a rerun
with the same seed yields identical files. That is why arrays go into a flat
length-prefixed container rather than a zip archive: zip members carry
timestamps. All writes are atomic (temp file in the same directory, then
rename) so a crash never leaves a half-written artifact behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"ADCB"
FORMAT_VERSION = 1


class StorageError(ValueError):
    """Corrupt or foreign artifact file."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    """Key-sorted compact JSON; equal dicts serialize to equal bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def append_jsonl(fh, obj) -> None:
    fh.write(canonical_json(obj) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Bundle named arrays (plus a small JSON meta block) into one file."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = little.tobytes()  # always C-order bytes, 0-d arrays stay 0-d
        entries.append(
            {
                "name": name,
                "dtype": little.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = canonical_json({"arrays": entries, "meta": meta or {}}).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header] + blobs
    atomic_write_bytes(path, b"".join(parts))


def load_arrays(path):
    """Returns (arrays dict, meta dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise StorageError(f"{path}: not an array bundle")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise StorageError(f"{path}: unsupported bundle version {version}")
    header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    body = data[12 + header_len :]
    arrays = {}
    for entry in header["arrays"]:
        blob = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise StorageError(f"{path}: truncated blob for {entry['name']!r}")
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
