"""Versioned checkpoint container.

A checkpoint is a zip of named numpy arrays (the parameter records) plus a
JSON header record carrying the format version, the checkpoint kind, and the
architecture metadata needed to rebuild the owning modules. Writes go through
a temp file and an atomic rename so a crash never leaves a torn checkpoint.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
_HEADER_KEY = "__header__"


@dataclass
class Checkpoint:
    kind: str
    meta: dict
    arrays: dict[str, np.ndarray]


def save_checkpoint(path: str | Path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    header = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta or {}}
    header_arr = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    payload = {_HEADER_KEY: header_arr}
    for name, arr in arrays.items():
        if name == _HEADER_KEY:
            raise ValueError(f"array name {name!r} is reserved")
        payload[name] = np.asarray(arr)

    buf = io.BytesIO()
    np.savez(buf, **payload)
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> Checkpoint:
    with np.load(path) as data:
        if _HEADER_KEY not in data:
            raise ValueError(f"{path}: not a checkpoint (missing header record)")
        header = json.loads(bytes(data[_HEADER_KEY]).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
        arrays = {k: data[k] for k in data.files if k != _HEADER_KEY}
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"{path}: checkpoint kind {kind!r}, expected {expect_kind!r}")
    return Checkpoint(kind=kind, meta=header["meta"], arrays=arrays)


def state_dict_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a module state dict into named numpy arrays."""
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Load arrays produced by :func:`state_dict_arrays` back into a module."""
    state = {}
    for k, v in arrays.items():
        if k.startswith(prefix):
            state[k[len(prefix):]] = torch.from_numpy(np.asarray(v))
    module.load_state_dict(state)


def checksum(module: torch.nn.Module) -> str:
    """Order-stable digest of all parameters and buffers, for freeze checks."""
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
