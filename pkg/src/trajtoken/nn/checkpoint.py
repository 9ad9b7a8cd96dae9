"""Checkpoint IO: named parameter arrays plus a JSON metadata blob.

Stored as .npz with a reserved ``__meta__`` entry carrying a format version
and arbitrary model config.  Loading into a module validates every shape
exactly and fails on missing or extra parameters.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .layers import Module

FORMAT_VERSION = 1

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]


class CheckpointError(ValueError):
    pass


def save_checkpoint(module: Module, path: str | Path, meta: dict | None = None) -> None:
    arrays = {name: p.data for name, p in module.named_parameters()}
    meta_doc = {"version": FORMAT_VERSION, "config": meta or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta_doc).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def read_meta(path: str | Path) -> dict:
    with np.load(path) as zf:
        meta = json.loads(bytes(zf["__meta__"]).decode())
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    return meta["config"]


def load_checkpoint(module: Module, path: str | Path) -> dict:
    """Load arrays into ``module`` in place; returns the stored config."""
    with np.load(path) as zf:
        meta = json.loads(bytes(zf["__meta__"]).decode())
        if meta.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        stored = {k: zf[k] for k in zf.files if k != "__meta__"}
    params = dict(module.named_parameters())
    missing = set(params) - set(stored)
    extra = set(stored) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
    for name, p in params.items():
        if stored[name].shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {stored[name].shape}, model {p.data.shape}"
            )
        p.data = stored[name].astype(np.float64)
    return meta["config"]
