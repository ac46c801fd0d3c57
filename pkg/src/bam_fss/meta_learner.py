"""Prototype-guided binary segmentation branch."""
from __future__ import annotations

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

MAP_EPS = 1e-5
LOG_EPS = 1e-12


def resize_mask(mask: torch.Tensor, size) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinear-resize a B,H,W mask to ``size`` and threshold at 0.5.

    A mask that vanishes keeps its single strongest location instead. Returns the
    resized B,1,h,w mask and a B-vector flagging which items fell back.
    """
    m = mask.unsqueeze(1)
    if not m.is_floating_point():
        m = m.to(torch.get_default_dtype())
    soft = F.interpolate(m, size, mode="bilinear", align_corners=True)
    hard = (soft >= 0.5).to(soft.dtype)
    empty = hard.flatten(1).sum(1) == 0
    fallback = empty & (m.flatten(1).sum(1) > 0)
    if fallback.any():
        log.debug("support mask vanished after resizing for %d item(s)", int(fallback.sum()))
        flat = soft.flatten(1)
        onehot = torch.zeros_like(flat)
        onehot.scatter_(1, flat.argmax(1, keepdim=True), 1.0)
        hard = torch.where(fallback[:, None, None, None], onehot.view_as(hard), hard)
    return hard, fallback


def masked_average_pooling(f: torch.Tensor, mask: torch.Tensor,
                           eps: float = MAP_EPS) -> torch.Tensor:
    """Prototype of B,c,h,w features under a B,H,W binary mask -> B,c."""
    m, _ = resize_mask(mask, f.shape[-2:])
    m = m.to(f.dtype)
    return (f * m).sum(dim=(2, 3)) / (m.sum(dim=(2, 3)) + eps)


def prior_map(b4_s: torch.Tensor, b4_q: torch.Tensor, mask_s: torch.Tensor,
              eps: float = 1e-7) -> torch.Tensor:
    """Training-free prior: max cosine similarity of each query pixel to the
    masked support pixels, min-max normalised per image. Returns B,1,h,w."""
    b, c, h, w = b4_q.shape
    m, _ = resize_mask(mask_s, b4_s.shape[-2:])
    s = (b4_s * m).flatten(2)                        # B,c,Ns
    q = b4_q.flatten(2)                              # B,c,Nq
    s = s / (s.norm(dim=1, keepdim=True) + eps)
    q = q / (q.norm(dim=1, keepdim=True) + eps)
    sim = torch.bmm(q.transpose(1, 2), s)            # B,Nq,Ns
    # masked-out support columns are zero vectors; exclude them from the max
    valid = m.flatten(1).bool()[:, None, :]
    sim = sim.masked_fill(~valid, float("-inf")).max(dim=2).values
    sim = torch.where(torch.isfinite(sim), sim, torch.zeros_like(sim))
    lo = sim.min(dim=1, keepdim=True).values
    hi = sim.max(dim=1, keepdim=True).values
    prior = (sim - lo) / (hi - lo + eps)
    return prior.view(b, 1, h, w)


class ASPP(nn.Module):
    def __init__(self, cin: int, cout: int, dilations=(1, 6, 12)):
        super().__init__()
        branches = []
        for d in dilations:
            k, p = (1, 0) if d == 1 else (3, d)
            branches.append(nn.Sequential(nn.Conv2d(cin, cout, k, padding=p, dilation=d),
                                          nn.ReLU(inplace=True)))
        self.branches = nn.ModuleList(branches)
        self.image_pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1),
                                        nn.ReLU(inplace=True))
        self.project = nn.Sequential(nn.Conv2d(cout * (len(dilations) + 1), cout, 1),
                                     nn.ReLU(inplace=True))

    def forward(self, x):
        size = x.shape[-2:]
        out = [branch(x) for branch in self.branches]
        out.append(self.image_pool(x).expand(-1, -1, *size))
        return self.project(torch.cat(out, 1))


class MetaLearner(nn.Module):
    """Reduce b2||b3, guide query features with the support prototype, decode.

    ``prior_wiring`` picks where the prior channel enters: ``"guidance"`` feeds it
    to the ASPP together with the expanded prototype, ``"decoder"`` appends it to
    the ASPP output instead. ``use_prior=False`` drops it.
    """

    def __init__(self, b2_channels: int, b3_channels: int, dim: int = 64,
                 use_prior: bool = True, prior_wiring: str = "guidance",
                 zero_init_head: bool = False):
        super().__init__()
        if prior_wiring not in ("guidance", "decoder"):
            raise ValueError(prior_wiring)
        self.dim = dim
        self.use_prior = use_prior
        self.prior_wiring = prior_wiring
        self.reduce = nn.Sequential(nn.Conv2d(b2_channels + b3_channels, dim, 1, bias=False),
                                    nn.ReLU(inplace=True))
        extra = 1 if use_prior else 0
        self.aspp = ASPP(2 * dim + (extra if prior_wiring == "guidance" else 0), dim)
        dec_in = dim + (extra if prior_wiring == "decoder" else 0)
        self.decoder = nn.Sequential(
            nn.Conv2d(dec_in, dim, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(dim, 2, 1)
        if zero_init_head:
            nn.init.zeros_(self.classifier.weight)
            nn.init.zeros_(self.classifier.bias)

    def reduce_features(self, b2: torch.Tensor, b3: torch.Tensor) -> torch.Tensor:
        if b2.shape[-2:] != b3.shape[-2:]:
            raise ValueError(f"b2 {tuple(b2.shape[-2:])} and b3 {tuple(b3.shape[-2:])} "
                             "are not spatially aligned")
        return self.reduce(torch.cat([b2, b3], 1))

    def logits(self, v_s, f_q, prior=None, size=None):
        h, w = f_q.shape[-2:]
        guide = [f_q, v_s[:, :, None, None].expand(-1, -1, h, w)]
        if self.use_prior:
            if prior is None:
                raise ValueError("prior map required when use_prior is set")
            if prior.shape[-2:] != (h, w):
                prior = F.interpolate(prior, (h, w), mode="bilinear", align_corners=True)
        if self.use_prior and self.prior_wiring == "guidance":
            guide.append(prior)
        x = self.aspp(torch.cat(guide, 1))
        if self.use_prior and self.prior_wiring == "decoder":
            x = torch.cat([x, prior], 1)
        x = self.classifier(self.decoder(x))
        if size is not None:
            x = F.interpolate(x, size, mode="bilinear", align_corners=True)
        return x

    def forward(self, v_s, f_q, prior=None, size=None):
        return self.logits(v_s, f_q, prior, size).softmax(dim=1)


def binary_ce(p_fg: torch.Tensor, gt: torch.Tensor, ignore_index: int = 255) -> torch.Tensor:
    """BCE of a B,H,W foreground probability against {0,1} labels (255 ignored)."""
    gt = gt.long()
    valid = gt != ignore_index
    if ((gt[valid] != 0) & (gt[valid] != 1)).any():
        raise ValueError("ground truth must be binary")
    y = torch.where(valid, gt, torch.zeros_like(gt)).to(p_fg.dtype)
    nll = -(y * torch.log(p_fg.clamp_min(LOG_EPS))
            + (1 - y) * torch.log((1 - p_fg).clamp_min(LOG_EPS)))
    per_episode = (nll * valid).flatten(1).sum(1) / valid.flatten(1).sum(1).clamp_min(1)
    return per_episode.mean()


def meta_loss(p_m: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return binary_ce(p_m[:, 1], gt)
