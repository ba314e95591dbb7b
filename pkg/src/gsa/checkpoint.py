"""Checkpoints: one ``.npz`` holding every named parameter plus a JSON metadata entry."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from gsa.indexer import SparsityState
from gsa.model import ModelConfig, TransformerLM

FORMAT = "gsa-checkpoint/1"
_META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: TransformerLM, path, extra: dict | None = None) -> Path:
    path = Path(path)
    meta = {
        "format": FORMAT,
        "model": model.cfg.to_dict(),
        "dtype": model.dtype.name,
        "states": [{"v_bar": s.v_bar, "decay": s.decay, "initialized": s.initialized} for s in model.states],
        "extra": extra or {},
    }
    arrays = {name: p.data for name, p in model.named_parameters().items()}
    arrays[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_meta(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if _META_KEY not in z.files:
            raise CheckpointError(f"{path} has no metadata entry")
        meta = json.loads(str(z[_META_KEY]))
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {meta.get('format')!r}")
    return meta


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[TransformerLM, dict]:
    """Rebuild the model bit-exactly. ``expected`` guards against a config/checkpoint mismatch."""
    meta = read_meta(path)
    cfg = ModelConfig.from_dict(meta["model"])
    if expected is not None and expected.to_dict() != cfg.to_dict():
        diff = sorted(_diff(expected.to_dict(), cfg.to_dict()))
        raise CheckpointError(f"model config does not match checkpoint: {', '.join(diff)}")
    model = TransformerLM(cfg, dtype=np.dtype(meta["dtype"]))
    params = model.named_parameters()
    with np.load(path, allow_pickle=False) as z:
        names = set(z.files) - {_META_KEY}
        if names != set(params):
            raise CheckpointError(f"parameter names differ: missing={sorted(set(params) - names)}, "
                                  f"unexpected={sorted(names - set(params))}")
        for name, p in params.items():
            arr = z[name]
            if arr.shape != p.data.shape or arr.dtype != p.data.dtype:
                raise CheckpointError(f"{name}: stored {arr.shape}/{arr.dtype}, model wants "
                                      f"{p.data.shape}/{p.data.dtype}")
            p.data = arr.copy()
    if len(meta["states"]) != len(model.states):
        raise CheckpointError("sparsity state count does not match the layer count")
    model.states = [SparsityState(**s) for s in meta["states"]]
    return model, meta


def _diff(a: dict, b: dict, prefix: str = ""):
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            yield from _diff(va, vb, f"{prefix}{key}.")
        elif va != vb:
            yield f"{prefix}{key} ({va!r} vs {vb!r})"
