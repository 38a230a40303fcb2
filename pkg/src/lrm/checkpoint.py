"""Checkpoint directories: ``manifest.json`` plus one little-endian float32 blob.

The manifest maps each tensor name to ``{shape, dtype: "f32", offset,
length}`` (offset and length in bytes within ``tensors.bin``) and carries a
free-form ``meta`` object (model config, optimizer step, RNG state).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        entries = {}
        offset = 0
        with open(root / BLOB, "wb") as fh:
            for name, arr in tensors.items():
                raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                entries[name] = {"shape": list(np.shape(arr)), "dtype": "f32",
                                 "offset": offset, "length": len(raw)}
                fh.write(raw)
                offset += len(raw)
        manifest = {"tensors": entries, "meta": meta or {}}
        (root / MANIFEST).write_text(json.dumps(manifest, indent=1))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {root}: {exc}") from exc


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(path)
    if not (root / MANIFEST).exists():
        raise FileNotFoundError(f"no checkpoint manifest at {root / MANIFEST}")
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupted checkpoint manifest {root / MANIFEST}: {exc}") from exc
    blob = (root / BLOB).read_bytes()
    out = {}
    for name, e in manifest.get("tensors", {}).items():
        if e.get("dtype") != "f32":
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {e.get('dtype')!r}")
        start, length = int(e["offset"]), int(e["length"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if length != 4 * count or start + length > len(blob):
            raise CheckpointError(f"tensor {name!r} does not fit the blob (offset {start}, length {length})")
        out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(e["shape"]).copy()
    return out, manifest.get("meta", {})


def assign_parameters(named_params, tensors: Mapping[str, np.ndarray]) -> None:
    """Copy stored arrays into parameters; every parameter must be present with its shape."""
    for name, p in named_params:
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != p.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.astype(np.float32).copy()
        p.grad = None
