"""Parameter collections and checkpoint directories.

A parameter collection is a plain ``dict[str, Tensor]`` with dotted names such
as ``"encoder.layer1.weight"``. Checkpoints store one ``.npy`` file per entry
next to a ``manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor
from .exceptions import CheckpointError

Params = dict[str, Tensor]

MANIFEST = "manifest.json"


def init_linear(rng, n_in: int, n_out: int, prefix: str, dtype=DEFAULT_DTYPE) -> Params:
    """Fan-in scaled uniform initialisation, ``U(-1/sqrt(n_in), 1/sqrt(n_in))``."""
    bound = 1.0 / np.sqrt(n_in)
    W = rng.uniform(-bound, bound, (n_out, n_in))
    b = rng.uniform(-bound, bound, (n_out,))
    return {f"{prefix}.weight": Tensor(W, dtype=dtype), f"{prefix}.bias": Tensor(b, dtype=dtype)}


def layer(params: Params, prefix: str) -> tuple[Tensor, Tensor]:
    return params[f"{prefix}.weight"], params[f"{prefix}.bias"]


def digest(params: Params) -> str:
    """SHA-256 over names, shapes, dtypes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.dtype.str.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def subset(params: Params, prefix: str) -> Params:
    return {k: v for k, v in params.items() if k.startswith(prefix + ".")}


def n_parameters(params: Params) -> int:
    return int(sum(t.size for t in params.values()))


def save_checkpoint(path, params: Params, manifest: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, t in params.items():
        np.save(path / f"{name}.npy", np.ascontiguousarray(t.data), allow_pickle=False)
        shapes[name] = list(t.shape)
    full = dict(manifest)
    full["shapes"] = shapes
    full["digest"] = digest(params)
    (path / MANIFEST).write_text(json.dumps(full, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> tuple[Params, dict]:
    path = Path(path)
    mf = path / MANIFEST
    if not mf.is_file():
        raise CheckpointError(f"no {MANIFEST} in {path}")
    manifest = json.loads(mf.read_text())
    params: Params = {}
    for name, shape in manifest.get("shapes", {}).items():
        f = path / f"{name}.npy"
        if not f.is_file():
            raise CheckpointError(f"checkpoint {path} is missing {f.name}")
        arr = np.load(f, allow_pickle=False)
        if list(arr.shape) != list(shape):
            raise CheckpointError(f"{f.name}: shape {arr.shape} disagrees with manifest {shape}")
        params[name] = Tensor(arr)
    if manifest.get("digest") and digest(params) != manifest["digest"]:
        raise CheckpointError(f"checkpoint {path} does not match its recorded digest")
    return params, manifest
