"""Binary container shared by every stage: JSON manifest + raw f64 payload.

Layout::

    b"BNCKPT\\n"                      magic
    uint64 little-endian             manifest length in bytes
    manifest (UTF-8 JSON)            {"version", "metadata", "tensors": [{name, shape, dtype, offset}]}
    payload                          concatenated little-endian float64, row-major

Tensor names are sorted lexicographically; offsets are relative to the
start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import DataFormatError

MAGIC = b"BNCKPT\n"
VERSION = "bundlenat-ckpt-1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f64", "offset": offset})
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    manifest = {"version": VERSION, "metadata": metadata or {}, "tensors": entries}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ``(tensors, metadata)``. Raises DataFormatError on any inconsistency."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise DataFormatError(f"{path}: truncated header")
    (head_len,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    try:
        manifest = json.loads(raw[pos : pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("version") != VERSION:
        raise DataFormatError(f"{path}: version {manifest.get('version')!r}, expected {VERSION!r}")
    payload = raw[pos + head_len :]
    names = [e["name"] for e in manifest["tensors"]]
    if names != sorted(set(names)):
        raise DataFormatError(f"{path}: manifest names must be unique and sorted")
    tensors = {}
    expected = 0
    for entry in manifest["tensors"]:
        if entry.get("dtype") != "f64":
            raise DataFormatError(f"{path}: tensor {entry['name']!r} has dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if entry["offset"] != expected:
            raise DataFormatError(f"{path}: tensor {entry['name']!r} offset {entry['offset']} != {expected}")
        chunk = payload[expected : expected + nbytes]
        if len(chunk) != nbytes:
            raise DataFormatError(f"{path}: payload truncated at {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        expected += nbytes
    if expected != len(payload):
        raise DataFormatError(f"{path}: payload has {len(payload) - expected} trailing bytes")
    return tensors, manifest["metadata"]
