"""Checkpoint directories: one raw little-endian float32 file per array plus a manifest."""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    """Missing, corrupt or incompatible checkpoint."""

    code = "CKPT_INVALID"


class CheckpointNotFound(CheckpointError):
    code = "CKPT_NOT_FOUND"


def _file_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".f32"


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray | torch.Tensor],
                meta: dict, overwrite: bool = True) -> Path:
    """Write ``arrays`` and ``meta`` into checkpoint directory ``path``.

    Output bytes depend only on the inputs, so saving twice is idempotent.
    """
    path = Path(path)
    if path.exists() and not overwrite and any(path.iterdir()):
        raise CheckpointError(f"{path} exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in arrays.items():
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        data = np.ascontiguousarray(arr, dtype="<f4")
        fname = _file_name(name)
        (path / fname).write_bytes(data.tobytes())
        entries.append({"name": name, "file": fname, "shape": list(data.shape),
                        "dtype": "<f4", "offset": 0, "nbytes": int(data.nbytes)})
    manifest = {"format": FORMAT_VERSION, "arrays": entries, **meta}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise CheckpointNotFound(f"no checkpoint at {path}")
    try:
        return json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {path}: {exc}") from exc


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = read_manifest(path)
    arrays = {}
    for e in manifest.get("arrays", []):
        f = path / e["file"]
        if not f.exists():
            raise CheckpointError(f"missing array {e['name']!r} ({e['file']}) in {path}")
        raw = f.read_bytes()
        expected = int(np.prod(e["shape"], dtype=np.int64)) * 4
        start = int(e.get("offset", 0))
        if len(raw) - start < expected:
            raise CheckpointError(
                f"array {e['name']!r}: expected {expected} bytes for shape {e['shape']}, "
                f"found {len(raw) - start}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4", count=expected // 4,
                                          offset=start).reshape(e["shape"]).copy()
    return arrays, manifest


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: Mapping[str, np.ndarray],
                       prefix: str = "") -> None:
    """Copy arrays into ``module`` after validating names and shapes."""
    state = module.state_dict()
    new_state = {}
    for k, v in state.items():
        key = prefix + k
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing array {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(v.shape):
            raise CheckpointError(f"array {key!r}: checkpoint shape {tuple(arr.shape)} "
                                  f"!= model shape {tuple(v.shape)}")
        new_state[k] = torch.as_tensor(arr, dtype=v.dtype)
    module.load_state_dict(new_state)


def save_module(path, module: torch.nn.Module, meta: dict) -> Path:
    return save_arrays(path, module_arrays(module), meta)
