"""Checkpoint archive: a zip holding manifest.json plus one .npy per named
parameter tensor. Writes are atomic (temp file + rename in the same dir).
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from .errors import VolumeIOError


def save_checkpoint(path, tensors: dict, manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".ckpt.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            with zipfile.ZipFile(f, "w", zipfile.ZIP_DEFLATED) as zf:
                zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
                for name, tensor in tensors.items():
                    arr = np.asarray(tensor.detach().cpu().numpy() if hasattr(tensor, "detach") else tensor)
                    buf = io.BytesIO()
                    np.save(buf, arr)
                    zf.writestr(f"tensors/{name}.npy", buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (tensors, manifest); tensors are numpy arrays keyed by name."""
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"no such checkpoint: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            tensors = {}
            for info in zf.infolist():
                if info.filename.startswith("tensors/") and info.filename.endswith(".npy"):
                    name = info.filename[len("tensors/") : -len(".npy")]
                    tensors[name] = np.load(io.BytesIO(zf.read(info.filename)))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise VolumeIOError(f"unreadable checkpoint {path}: {e}") from e
    return tensors, manifest


def state_dict_tensors(module) -> dict:
    """Torch state_dict as plain numpy arrays."""
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def param_checksum(module) -> str:
    """SHA-256 over all parameter/buffer bytes; bitwise change detector."""
    import hashlib

    h = hashlib.sha256()
    for name, arr in sorted(state_dict_tensors(module).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def load_state_into(module, tensors: dict, prefix: str = "") -> None:
    import torch

    state = {}
    for k in module.state_dict():
        full = prefix + k
        if full not in tensors:
            raise VolumeIOError(f"checkpoint is missing tensor '{full}'")
        state[k] = torch.from_numpy(np.asarray(tensors[full]))
    module.load_state_dict(state)
