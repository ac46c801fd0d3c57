"""The full two-learner model wired together for K-shot episodes."""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import torch
import torch.nn as nn

from .base_learner import BaseLearner, aggregate_base_foreground
from .encoder import Encoder, EncoderConfig
from .ensemble import EnsembleModule, KShotReweighter, PsiSquash, adjustment_factor, \
    gram_matrix, kshot_combine
from .meta_learner import MetaLearner, masked_average_pooling, prior_map

KSHOT_FUSIONS = ("reweight", "feature-avg", "mask-avg", "mask-or")
LEARNERS = ("bam", "meta-only", "base-only")


@dataclass(frozen=True)
class ModelConfig:
    num_base: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    base_width: int = 64
    meta_dim: int = 64
    use_prior: bool = True
    prior_wiring: str = "guidance"
    gram_tap: str = "b2"
    gram_normalize: bool = True
    use_psi: bool = True
    ensemble_init: str = "identity"
    shots: int = 1
    reduction: int = 1
    kshot_fusion: str = "reweight"
    reweight_scope: str = "all"

    def __post_init__(self):
        if self.gram_tap.lower() not in ("b1", "b2", "b3", "b4"):
            raise ValueError(f"unknown Gram tap {self.gram_tap}")
        if self.kshot_fusion not in KSHOT_FUSIONS:
            raise ValueError(f"unknown K-shot fusion {self.kshot_fusion}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = d.pop("encoder", {})
        enc = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in enc.items()})
        return cls(encoder=enc, **d)

    def with_shots(self, shots: int) -> "ModelConfig":
        return replace(self, shots=shots)


class BAMOutput(NamedTuple):
    p_m: torch.Tensor      # B,2,H,W meta probabilities
    p_b: torch.Tensor      # B,1+N_b,H,W base probabilities
    p_b_f: torch.Tensor    # B,1,H,W aggregated base foreground
    psi: torch.Tensor      # B combined raw adjustment factor
    psi_sq: torch.Tensor   # B squashed factor fed to the ensemble
    p_f: torch.Tensor      # B,2,H,W final (unnormalised) scores
    eta: torch.Tensor      # B,K shot weights


class BAM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        enc = config.encoder
        self.encoder = Encoder(enc)
        self.base = BaseLearner(enc.channels[3], config.num_base, config.base_width)
        self.meta = MetaLearner(enc.channels[1], enc.channels[2], config.meta_dim,
                                use_prior=config.use_prior, prior_wiring=config.prior_wiring)
        self.ensemble = EnsembleModule(config.use_psi, config.ensemble_init)
        self.squash = PsiSquash()
        self.reweighter = KShotReweighter(config.shots, config.reduction)

    # -- parameter groups -------------------------------------------------
    def stage1_parameters(self):
        return list(self.encoder.parameters()) + list(self.base.parameters())

    def stage2_parameters(self):
        return (list(self.meta.parameters()) + list(self.ensemble.parameters())
                + list(self.reweighter.parameters()))

    def freeze_stage1(self, flag: bool = True) -> None:
        self.encoder.set_frozen(flag)
        for p in self.base.parameters():
            p.requires_grad_(not flag)

    # -- pieces -----------------------------------------------------------
    def _maybe_no_grad(self, module_frozen: bool):
        return torch.no_grad() if module_frozen else contextlib.nullcontext()

    def encode(self, images: torch.Tensor):
        return self.encoder(images)

    def base_forward(self, b4: torch.Tensor, size) -> torch.Tensor:
        frozen = not any(p.requires_grad for p in self.base.parameters())
        with self._maybe_no_grad(frozen):
            return self.base(b4, size)

    # -- episode forward --------------------------------------------------
    def forward(self, query: torch.Tensor, support: torch.Tensor,
                support_mask: torch.Tensor, fusion: str | None = None,
                class_dense_id: torch.Tensor | None = None) -> BAMOutput:
        """query: B,3,H,W; support: B,K,3,H,W; support_mask: B,K,H,W.

        ``class_dense_id`` (B, 0 for a non-base class) removes the episode's own class
        from the base foreground when the episode class is itself a base class.
        """
        cfg = self.config
        fusion = fusion or cfg.kshot_fusion
        b, k = support.shape[:2]
        size = query.shape[-2:]
        with self._maybe_no_grad(self.encoder.frozen):
            fq = self.encoder(query)
            fs = self.encoder(support.flatten(0, 1))
        masks = support_mask.flatten(0, 1)

        f_q = self.meta.reduce_features(fq.b2, fq.b3)
        f_s = self.meta.reduce_features(fs.b2, fs.b3)
        protos = masked_average_pooling(f_s, masks).view(b, k, -1)
        priors = None
        if cfg.use_prior:
            b4_q = fq.b4.repeat_interleave(k, dim=0)
            priors = prior_map(fs.b4, b4_q, masks).view(b, k, 1, *fq.b4.shape[-2:])

        tap = cfg.gram_tap.lower()
        g_q = gram_matrix(fq.tap(tap), cfg.gram_normalize).repeat_interleave(k, dim=0)
        g_s = gram_matrix(fs.tap(tap), cfg.gram_normalize)
        psi_t = adjustment_factor(g_s, g_q).view(b, k)
        if self.training:
            self.squash.update(psi_t)

        if fusion in ("reweight", "feature-avg"):
            if fusion == "reweight" and k == self.reweighter.shots:
                eta = self.reweighter(self.squash(psi_t)).eta
            else:
                eta = torch.full_like(psi_t, 1.0 / k)
            scope = cfg.reweight_scope if fusion == "reweight" else "all"
            v, prior, psi = kshot_combine(protos, priors, psi_t, eta, scope)
            p_m = self.meta(v, f_q, prior, size)
        else:
            eta = torch.full_like(psi_t, 1.0 / k)
            per_shot = [self.meta(protos[:, i], f_q, None if priors is None else priors[:, i],
                                  size) for i in range(k)]
            stacked = torch.stack(per_shot, 1)
            if fusion == "mask-avg":
                p_m = stacked.mean(1)
            else:
                fg = (stacked.argmax(2) == 1).any(1).to(stacked.dtype)
                p_m = torch.stack([1 - fg, fg], 1)
            psi = psi_t.mean(1)

        p_b = self.base_forward(fq.b4, size)
        p_b_f = aggregate_base_foreground(p_b, class_dense_id)
        psi_sq = self.squash(psi)
        p_f = self.ensemble(p_m, p_b_f, psi_sq)
        return BAMOutput(p_m, p_b, p_b_f, psi, psi_sq, p_f, eta)


def foreground_probability(out: BAMOutput, learner: str = "bam",
                           class_dense_id: torch.Tensor | None = None) -> torch.Tensor:
    """B,H,W foreground probability of the chosen path.

    ``base-only`` can only name base classes: it scores the episode class's own
    base channel when that class is a base class (dense id > 0), else zero.
    """
    if learner == "bam":
        return out.p_f.softmax(1)[:, 1]
    if learner == "meta-only":
        return out.p_m[:, 1]
    if learner == "base-only":
        if class_dense_id is None:
            return torch.zeros_like(out.p_m[:, 1])
        idx = class_dense_id.long().clamp_min(0).view(-1, 1, 1, 1)
        idx = idx.expand(-1, 1, *out.p_b.shape[-2:])
        p = out.p_b.gather(1, idx)[:, 0]
        return p * (class_dense_id.view(-1, 1, 1) > 0)
    raise ValueError(f"unknown learner {learner}")


def predict_mask(out: BAMOutput, learner: str = "bam",
                 class_dense_id: torch.Tensor | None = None) -> torch.Tensor:
    """Binary B,H,W prediction (channel argmax, ties to background)."""
    if learner == "bam":
        return out.p_f.argmax(1)
    if learner == "meta-only":
        return out.p_m.argmax(1)
    if learner != "base-only":
        raise ValueError(f"unknown learner {learner}")
    if class_dense_id is None:
        return torch.zeros_like(out.p_m[:, 1], dtype=torch.long)
    dense = class_dense_id.long().view(-1, 1, 1)
    return ((out.p_b.argmax(1) == dense) & (dense > 0)).long()
