"""Checkpoint container: one JSON header line followed by raw float64 blobs.

Layout::

    CORMP-CKPT\n
    {"format_version": 1, "architecture": {...}, "seed": ..., "params": [...], ...}\n
    <little-endian float64 payload, parameters in declaration order>

The header records each blob's shape and a SHA-256 of the payload so that
truncation and corruption are detected on load.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import CheckpointVersionError, CorruptCheckpointError

MAGIC = b"CORMP-CKPT\n"
FORMAT_VERSION = 1


def save_params(path, params, architecture, seed=None, metadata=None):
    arrays = [np.ascontiguousarray(p, dtype="<f8") for p in params]
    payload = b"".join(a.tobytes() for a in arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": architecture,
        "seed": seed,
        "metadata": metadata or {},
        "params": [list(a.shape) for a in arrays],
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    Path(path).write_bytes(blob)


def load_params(path):
    """Return ``(header, params)``; raises on version mismatch or damage."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CorruptCheckpointError(f"{path}: not a checkpoint file (bad magic)")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise CorruptCheckpointError(f"{path}: header is truncated")
    try:
        header = json.loads(raw[len(MAGIC):end])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format_version {version!r}, expected {FORMAT_VERSION}")
    payload = raw[end + 1:]
    if len(payload) != header.get("payload_bytes"):
        raise CorruptCheckpointError(
            f"{path}: payload is {len(payload)} bytes, header declares {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch")
    params, offset = [], 0
    for shape in header["params"]:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape)
        params.append(arr.astype(np.float64))
        offset += 8 * n
    if offset != len(payload):
        raise CorruptCheckpointError(f"{path}: parameter shapes do not cover the payload")
    return header, params
