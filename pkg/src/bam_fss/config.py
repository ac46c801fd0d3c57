"""Training / evaluation configuration and its key-value file format.

Config files are INI-style with a single ``[bam]`` section::

    [bam]
    fold = 0
    shots = 1
    lr = 0.05
    seeds = 0, 1, 2
    use_psi = true
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "meta"               # "pretrain" | "meta"
    epochs: int = 20
    batch_size: int = 8               # images per step (stage 1) / episodes per step (stage 2)
    episodes_per_epoch: int = 200     # stage 2 only
    lr: float = 5e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9           # stage 1 poly decay; stage 2 uses a constant lr
    fold: int = 0
    num_folds: int = 3
    shots: int = 1
    lam: float = 1.0
    seeds: tuple = (0, 1, 2)
    annotation_mode: str = "mask"     # "mask" | "bbox" (support masks only)
    augment: bool = True
    prior_bias: bool = True           # classifier bias starts at log label frequencies
    drop_novel_images: bool = True    # meta-training episodes avoid images with novel classes
    # ablation knobs
    use_psi: bool = True
    ensemble_init: str = "identity"   # "identity" | "random"
    gram_tap: str = "b2"
    gram_normalize: bool = True
    kshot_fusion: str = "reweight"
    reweight_scope: str = "all"
    use_prior: bool = True
    prior_wiring: str = "guidance"
    reduction: int = 1
    use_ensemble: bool = True         # False trains the meta learner alone on its own loss
    # evaluation
    episodes: int = 200
    learner: str = "bam"
    eval_batch: int = 16

    def __post_init__(self):
        if self.stage not in ("pretrain", "meta"):
            raise ValueError(f"unknown stage {self.stage}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.annotation_mode not in ("mask", "bbox"):
            raise ValueError(f"unknown annotation mode {self.annotation_mode}")
        if self.ensemble_init not in ("identity", "random"):
            raise ValueError(f"unknown ensemble init {self.ensemble_init}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names}
        return cls(**d)

    def override(self, **kwargs) -> "TrainConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


def _coerce(raw: str, template):
    if isinstance(template, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw.strip()


def load_config(path: str | Path | None, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    if path is None:
        return base
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    if "bam" not in parser:
        raise ValueError(f"{path}: missing [bam] section")
    defaults = base.to_dict()
    values = {}
    for key, raw in parser["bam"].items():
        key = key.replace("-", "_")
        if key == "lambda":
            key = "lam"
        if key not in defaults:
            raise ValueError(f"{path}: unknown key {key!r}")
        values[key] = _coerce(raw, defaults[key])
    return base.override(**values)


def dump_config(config: TrainConfig) -> str:
    lines = ["[bam]"]
    for k, v in config.to_dict().items():
        if isinstance(v, (tuple, list)):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
