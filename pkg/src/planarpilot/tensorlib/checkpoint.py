"""Checkpoint directory format.

A checkpoint is a directory with two files:

  manifest.json  format_version, model hyperparameters, and a tensor table
                 (name, shape, dtype "f32", byte_offset, byte_length)
  weights.bin    little-endian float32 values, concatenated in manifest order
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], hyper: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        nbytes = data.nbytes
        entries.append(
            {
                "name": name,
                "shape": list(data.shape),
                "dtype": "f32",
                "byte_offset": offset,
                "byte_length": nbytes,
            }
        )
        blobs.append(data.tobytes())
        offset += nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "hyperparameters": hyper,
        "tensors": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / "weights.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {manifest.get('format_version')}")
    raw = (path / "weights.bin").read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f32":
            raise ValueError(f"unsupported dtype {e['dtype']} for tensor {e['name']}")
        start, ln = e["byte_offset"], e["byte_length"]
        if start + ln > len(raw):
            raise ValueError(f"tensor {e['name']} overruns weights.bin")
        arr = np.frombuffer(raw[start : start + ln], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    return tensors, manifest["hyperparameters"]
