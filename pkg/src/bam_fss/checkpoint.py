"""Checkpoint container.

A checkpoint is a NumPy ``.npz`` archive. Every model tensor (parameters and
buffers) is stored under ``param/<dotted.name>`` as a float array of its own shape.
The entry ``__meta__`` holds a UTF-8 JSON document::

    {"format": "bam-fss-checkpoint", "version": 1,
     "stage": "pretrain" | "meta",
     "model_config": {...}, "train_config": {...},
     "split": {"fold_index": .., "num_folds": .., "base": [...], "novel": [...]},
     "class_table": [0, b1, b2, ...]}       # dense base id -> original class id

Stage-1 and stage-2 checkpoints share the layout.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .data import ClassSplit
from .model import BAM, ModelConfig

FORMAT = "bam-fss-checkpoint"
VERSION = 1


def split_to_dict(split: ClassSplit) -> dict:
    return {"fold_index": split.fold_index, "num_folds": split.num_folds,
            "base": sorted(split.base_classes), "novel": sorted(split.novel_classes)}


def split_from_dict(d: dict) -> ClassSplit:
    return ClassSplit(d["fold_index"], frozenset(d["base"]), frozenset(d["novel"]),
                      d["num_folds"])


def save_checkpoint(path, model: BAM, split: ClassSplit, stage: str,
                    train_config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": FORMAT, "version": VERSION, "stage": stage,
            "model_config": model.config.to_dict(), "train_config": train_config or {},
            "split": split_to_dict(split), "class_table": split.base_lookup().tolist()}
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT}")
    if meta.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    return meta, params


def load_checkpoint(path, model_config: ModelConfig | None = None,
                    prefixes: tuple | None = None):
    """Rebuild a model from ``path``.

    ``model_config`` overrides the stored architecture (e.g. a different shot
    count for stage 2); ``prefixes`` restricts which tensors are restored.
    Returns (model, meta).
    """
    meta, params = read_checkpoint(path)
    cfg = model_config or ModelConfig.from_dict(meta["model_config"])
    model = BAM(cfg)
    state = model.state_dict()
    for name, arr in params.items():
        if prefixes is not None and not name.startswith(prefixes):
            continue
        if name not in state:
            continue
        if tuple(state[name].shape) != arr.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tuple(state[name].shape)}")
        state[name] = torch.from_numpy(np.array(arr)).to(state[name].dtype)
    model.load_state_dict(state)
    return model, meta


def parameter_hash(modules) -> str:
    """SHA-256 over the raw bytes of every tensor in the given modules' state."""
    h = hashlib.sha256()
    for module in modules:
        for name, t in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
