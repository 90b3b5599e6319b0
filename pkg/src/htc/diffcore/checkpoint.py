"""Checkpoint directories: ``manifest.json`` plus one raw little-endian file per tensor."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional

import numpy as np

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


def _le(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def save_checkpoint(
    path,
    params: dict[str, np.ndarray],
    config_hash: str,
    optimizer_state: Optional[dict[str, np.ndarray]] = None,
    extra: Optional[dict] = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for group, tensors in (("params", params), ("optim", optimizer_state or {})):
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            fname = f"{group}.{name}.bin"
            (path / fname).write_bytes(arr.astype(_le(arr.dtype)).tobytes())
            entries.append(
                {"group": group, "name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "file": fname}
            )
    manifest = {
        "format": FORMAT_VERSION,
        "config_hash": config_hash,
        "tensors": entries,
        "extra": extra or {},
    }
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, path / MANIFEST)
    return path


def load_checkpoint(path) -> dict:
    """Returns ``{"params", "optim", "config_hash", "extra"}``."""
    path = Path(path)
    mfile = path / MANIFEST
    if not mfile.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mfile}")
    manifest = json.loads(mfile.read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"{mfile}: unsupported checkpoint format {manifest.get('format')!r}")
    out = {"params": {}, "optim": {}, "config_hash": manifest["config_hash"], "extra": manifest.get("extra", {})}
    for e in manifest["tensors"]:
        dtype = _le(e["dtype"])
        raw = (path / e["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).astype(np.dtype(e["dtype"]))
        out[e["group"]][e["name"]] = arr
    return out
