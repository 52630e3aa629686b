"""Checkpoint format shared by the modifier, face classifier and detector.

A checkpoint is a ``torch.save`` payload::

    {"kind": str, "config": dict, "shapes": {name: [dims]}, "state": state_dict}
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import tempfile
from pathlib import Path

import torch
import torch.nn as nn


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, kind: str, model: nn.Module, config) -> None:
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    cfg = dataclasses.asdict(config) if dataclasses.is_dataclass(config) else dict(config)
    payload = {
        "kind": kind,
        "config": cfg,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state": state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    for name, shape in payload["shapes"].items():
        if list(payload["state"][name].shape) != shape:
            raise CheckpointError(f"{path}: shape metadata mismatch for {name}")
    return payload


def parameter_hash(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
