"""Checkpoints: a JSON manifest next to a little-endian float64 tensor blob."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import ValidationError
from .model import LpeConfig, LpeModel

FORMAT = "ssp-lpe-checkpoint"
VERSION = 1


def _tensors(model: LpeModel, adam=None) -> list[tuple[str, np.ndarray]]:
    out = model.state_arrays()
    if adam is not None:
        out += [("adam.m:" + k, v) for k, v in adam.m.items()]
        out += [("adam.v:" + k, v) for k, v in adam.v.items()]
    return out


def save_checkpoint(path, model: LpeModel, trainer=None, extra: Optional[dict] = None) -> Path:
    """Write ``path`` (JSON manifest) and ``path.with_suffix('.bin')``.

    With a trainer, optimizer moments, epoch, step and RNG state are included
    so training resumes exactly.
    """
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    tensors = _tensors(model, trainer.adam if trainer is not None else None)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(dict(name=name, shape=list(arr.shape), offset=offset))
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = dict(format=FORMAT, version=VERSION, lpe=model.cfg.to_json(),
                    param_count=model.param_count, tensors=entries, blob=blob_path.name,
                    sha256=hashlib.sha256(blob).hexdigest())
    if trainer is not None:
        manifest["trainer"] = dict(epoch=trainer.epoch, step=trainer.step_count, adam_t=trainer.adam.t,
                                   rng=trainer.rng.bit_generator.state, history=trainer.history)
    if extra:
        manifest.update(extra)
    blob_path.write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text())
    if manifest.get("format") != FORMAT:
        raise ValidationError(f"{path} is not a model checkpoint")
    return manifest


def load_checkpoint(path, model: Optional[LpeModel] = None, trainer=None) -> LpeModel:
    """Restore tensors into ``model`` (built from the manifest if omitted) and optionally a trainer."""
    path = Path(path)
    manifest = read_manifest(path)
    if model is None:
        model = LpeModel(LpeConfig(**manifest["lpe"]))
    blob = (path.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValidationError(f"checkpoint blob for {path} is corrupt")
    stored = {e["name"]: e for e in manifest["tensors"]}
    want = _tensors(model, trainer.adam if trainer is not None else None)
    for name, arr in want:
        entry = stored.get(name)
        if entry is None:
            raise ValidationError(f"checkpoint has no tensor {name!r}")
        if tuple(entry["shape"]) != arr.shape:
            raise ValidationError(f"tensor {name!r} has shape {tuple(entry['shape'])}, "
                                  f"model expects {arr.shape}")
        arr[...] = np.frombuffer(blob, dtype="<f8", count=arr.size,
                                 offset=entry["offset"]).reshape(arr.shape)
    if trainer is not None:
        state = manifest.get("trainer")
        if state is None:
            raise ValidationError(f"{path} holds no training state")
        trainer.epoch, trainer.step_count = state["epoch"], state["step"]
        trainer.adam.t = state["adam_t"]
        trainer.rng.bit_generator.state = state["rng"]
        trainer.history = list(state["history"])
    return model
