"""Checkpoint container: one JSON header line followed by a little-endian float32 blob."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

FORMAT = "sharedbit-ckpt"
VERSION = 1


class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TopologyMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], topology_hash: str, meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        b = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    blob = b"".join(chunks)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "topology_hash": topology_hash,
        "tensors": entries,
        "checksum": hashlib.sha256(blob).hexdigest(),
        "meta": meta,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path, expected_topology: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)``; raises a specific :class:`CheckpointError` on any defect."""
    try:
        with open(path, "rb") as fh:
            line = fh.readline()
            blob = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: checkpoint not found") from None
    try:
        header = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CorruptCheckpointError(f"{path}: unreadable header") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CorruptCheckpointError(f"{path}: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise VersionMismatchError(f"{path}: format version {header.get('version')}, expected {VERSION}")
    if expected_topology is not None and header.get("topology_hash") != expected_topology:
        raise TopologyMismatchError(
            f"{path}: topology {header.get('topology_hash')} does not match model {expected_topology}"
        )
    if hashlib.sha256(blob).hexdigest() != header.get("checksum"):
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CorruptCheckpointError(f"{path}: tensor {e['name']} runs past end of payload")
        a = np.frombuffer(blob[e["offset"] : end], dtype="<f4").reshape(e["shape"])
        arrays[e["name"]] = a.astype(np.float32)
    return header, arrays
