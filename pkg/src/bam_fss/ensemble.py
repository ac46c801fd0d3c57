"""Gram-signature scene difference and the psi-guided fusion of the two learners, with K-shot reweighting."""
from __future__ import annotations

from collections import deque
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .meta_learner import meta_loss


def gram_matrix(f_low: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """B,C,H,W -> B,C,C channel co-activation matrix A A^T (divided by H*W by default)."""
    a = f_low.flatten(2)
    g = torch.bmm(a, a.transpose(1, 2))
    if normalize:
        g = g / a.shape[-1]
    return g


def adjustment_factor(g_s: torch.Tensor, g_q: torch.Tensor) -> torch.Tensor:
    """Frobenius norm of the Gram difference, one scalar per batch item."""
    if g_s.shape != g_q.shape:
        raise ValueError(f"Gram shapes differ: {tuple(g_s.shape)} vs {tuple(g_q.shape)}")
    return torch.linalg.matrix_norm(g_s - g_q, ord="fro")


class PsiSquash(nn.Module):
    """Maps psi >= 0 into [0, 1) as psi / (psi + m), m the running median of
    psi values passed to ``update`` (called only while training)."""

    def __init__(self, window: int = 2048):
        super().__init__()
        self.register_buffer("median", torch.tensor(1.0, dtype=torch.float64))
        self.history: deque = deque(maxlen=window)

    @torch.no_grad()
    def update(self, psi: torch.Tensor) -> None:
        self.history.extend(float(v) for v in psi.detach().flatten())
        if self.history:
            med = torch.tensor(list(self.history), dtype=torch.float64).median()
            self.median.fill_(max(float(med), 1e-12))

    def forward(self, psi: torch.Tensor) -> torch.Tensor:
        m = self.median.to(psi.dtype)
        return psi / (psi + m)


def _pair_conv(init: str) -> nn.Conv2d:
    conv = nn.Conv2d(2, 1, 1, bias=False)
    if init == "identity":
        with torch.no_grad():
            conv.weight.zero_()
            conv.weight[0, 0] = 1.0
    return conv


class EnsembleModule(nn.Module):
    """1x1 combiners: ``w_psi`` adjusts meta channels with psi, ``w_ens`` merges the
    adjusted meta background with the base learner's foreground."""

    def __init__(self, use_psi: bool = True, init: str = "identity"):
        super().__init__()
        if init not in ("identity", "random"):
            raise ValueError(init)
        self.use_psi = use_psi
        self.w_psi = _pair_conv(init)
        self.w_ens = _pair_conv(init)

    def adjust_meta(self, p: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
        """p: B,1,H,W meta channel; psi: B squashed factors."""
        if not self.use_psi:
            return p
        plane = psi.to(p.dtype).view(-1, 1, 1, 1).expand_as(p)
        return self.w_psi(torch.cat([p, plane], 1))

    def forward(self, p_m: torch.Tensor, p_b_f: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
        if p_m.shape[-2:] != p_b_f.shape[-2:]:
            raise ValueError("meta and base maps are not aligned")
        bg = self.adjust_meta(p_m[:, 0:1], psi)
        fg = self.adjust_meta(p_m[:, 1:2], psi)
        bg = self.w_ens(torch.cat([bg, p_b_f], 1))
        return torch.cat([bg, fg], 1)


def final_loss(p_f: torch.Tensor, gt: torch.Tensor, ignore_index: int = 255) -> torch.Tensor:
    """Two-class cross-entropy on softmax of the final score map."""
    gt = gt.long()
    valid = gt != ignore_index
    if ((gt[valid] != 0) & (gt[valid] != 1)).any():
        raise ValueError("ground truth must be binary")
    target = torch.where(valid, gt, torch.zeros_like(gt))
    nll = F.cross_entropy(p_f, target, reduction="none")
    per_episode = (nll * valid).flatten(1).sum(1) / valid.flatten(1).sum(1).clamp_min(1)
    return per_episode.mean()


def total_loss(p_f, p_m, gt, lam: float = 1.0) -> torch.Tensor:
    loss = final_loss(p_f, gt)
    if lam:
        loss = loss + lam * meta_loss(p_m, gt)
    return loss


class ShotWeights(NamedTuple):
    eta: torch.Tensor
    psi_t: torch.Tensor
    reduction: int


class KShotReweighter(nn.Module):
    """eta = softmax(w2^T relu(w1^T psi_t)); w1 starts as (a slice of) the identity,
    w2 at zero, so the initial weights are uniform."""

    def __init__(self, shots: int, reduction: int = 1):
        super().__init__()
        if shots < 1 or reduction < 1 or shots % reduction:
            raise ValueError(f"K={shots} is not divisible by r={reduction}")
        self.shots = shots
        self.reduction = reduction
        hidden = shots // reduction
        self.w1 = nn.Parameter(torch.eye(shots)[:, :hidden].clone())
        self.w2 = nn.Parameter(torch.zeros(hidden, shots))

    def forward(self, psi_t: torch.Tensor) -> ShotWeights:
        return kshot_weights(psi_t, self.w1, self.w2, self.reduction)


def kshot_weights(psi_t: torch.Tensor, w1: torch.Tensor, w2: torch.Tensor,
                  reduction: int = 1) -> ShotWeights:
    """psi_t: (..., K). Returns softmax-normalised per-shot weights."""
    k = psi_t.shape[-1]
    if k % reduction:
        raise ValueError(f"K={k} is not divisible by r={reduction}")
    if w1.shape != (k, k // reduction) or w2.shape != (k // reduction, k):
        raise ValueError("weight shapes do not match K and r")
    hidden = torch.relu(psi_t @ w1.to(psi_t.dtype))
    eta = torch.softmax(hidden @ w2.to(psi_t.dtype), dim=-1)
    return ShotWeights(eta, psi_t, reduction)


def kshot_combine(prototypes: torch.Tensor, priors: torch.Tensor | None,
                  psi: torch.Tensor, eta: torch.Tensor, scope: str = "all"):
    """Weighted merge of per-shot quantities.

    prototypes: B,K,c; priors: B,K,1,h,w or None; psi: B,K; eta: B,K.
    ``scope="psi"`` reweights only psi and averages prototypes/priors uniformly.
    """
    if scope not in ("all", "psi"):
        raise ValueError(scope)
    psi_out = (eta * psi).sum(1)
    w = eta if scope == "all" else torch.full_like(eta, 1.0 / eta.shape[1])
    v = (w[:, :, None] * prototypes).sum(1)
    prior = None
    if priors is not None:
        prior = (w[:, :, None, None, None] * priors).sum(1)
    return v, prior, psi_out

