"""Checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"VARYCKPT"
    u32       format version (currently 1)
    u64       header length N
    N bytes   UTF-8 JSON header, keys sorted:
                model_kind, stage, config (model config echo), extra,
                tensors: [{name, shape, offset, nbytes}, ...]
    payload   float32 little-endian tensor data, concatenated in header order

Offsets are relative to the start of the payload. Saving the same model
twice produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VARYCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_kind: str
    stage: str
    config: dict
    params: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def save(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, arr in ckpt.params.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "model_kind": ckpt.model_kind,
            "stage": ckpt.stage,
            "config": ckpt.config,
            "extra": ckpt.extra,
            "tensors": entries,
        },
        sort_keys=True,
    ).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def load(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    payload = memoryview(raw)[start + hlen :]
    params = {}
    for t in header["tensors"]:
        chunk = payload[t["offset"] : t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {t['name']}")
        params[t["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(t["shape"]).astype(np.float32)
    return Checkpoint(header["model_kind"], header["stage"], header["config"], params, header["extra"])


def digest(params: dict[str, np.ndarray], prefix: str = "") -> str:
    """SHA-256 over names and float32 bytes of parameters under ``prefix``."""
    h = hashlib.sha256()
    for name in sorted(params):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return h.hexdigest()
