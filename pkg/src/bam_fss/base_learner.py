"""Supervised base learner: conv block + pyramid pooling decoder over base classes."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_EPS = 1e-12


class PyramidPooling(nn.Module):
    def __init__(self, cin: int, branch_dim: int, bins=(1, 2, 3, 6)):
        super().__init__()
        self.stages = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(b), nn.Conv2d(cin, branch_dim, 1, bias=False),
                          nn.ReLU(inplace=True))
            for b in bins
        )
        self.out_channels = cin + len(bins) * branch_dim

    def forward(self, x):
        size = x.shape[-2:]
        out = [x]
        for stage in self.stages:
            out.append(F.interpolate(stage(x), size, mode="bilinear", align_corners=True))
        return torch.cat(out, 1)


class BaseLearner(nn.Module):
    """Predicts a (1 + N_b)-channel probability map from the deepest encoder tap."""

    def __init__(self, in_channels: int, num_base: int, width: int = 64,
                 zero_init_head: bool = False):
        super().__init__()
        if num_base < 1:
            raise ValueError("base learner needs at least one base class")
        self.num_base = num_base
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1, bias=False),
            nn.GroupNorm(4, width),
            nn.ReLU(inplace=True),
        )
        self.ppm = PyramidPooling(width, width // 4)
        self.decoder = nn.Sequential(
            nn.Conv2d(self.ppm.out_channels, width, 3, padding=1, bias=False),
            nn.GroupNorm(4, width),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(width, 1 + num_base, 1)
        if zero_init_head:
            nn.init.zeros_(self.classifier.weight)
            nn.init.zeros_(self.classifier.bias)

    @torch.no_grad()
    def init_prior_bias(self, class_counts) -> None:
        """Start the classifier at the label frequencies (log-prior bias, zero-mean weights
        untouched) so training does not begin by unlearning a uniform guess."""
        counts = torch.as_tensor(class_counts, dtype=torch.float64).clamp_min(1.0)
        if counts.numel() != self.classifier.out_channels:
            raise ValueError(f"expected {self.classifier.out_channels} class counts")
        log_prior = (counts / counts.sum()).log()
        self.classifier.bias.copy_((log_prior - log_prior.mean()).to(self.classifier.bias))

    def logits(self, b4: torch.Tensor, size) -> torch.Tensor:
        x = self.decoder(self.ppm(self.conv(b4)))
        x = self.classifier(x)
        return F.interpolate(x, size, mode="bilinear", align_corners=True)

    def forward(self, b4: torch.Tensor, size) -> torch.Tensor:
        return self.logits(b4, size).softmax(dim=1)


def base_loss(p_b: torch.Tensor, gt: torch.Tensor, ignore_index: int = 255) -> torch.Tensor:
    """Pixel-wise cross-entropy on probabilities, averaged over batch and pixels."""
    gt = gt.long()
    valid = gt != ignore_index
    if (gt[valid] >= p_b.shape[1]).any() or (gt[valid] < 0).any():
        raise ValueError(f"label ids outside 0..{p_b.shape[1] - 1}")
    target = torch.where(valid, gt, torch.zeros_like(gt))
    picked = p_b.gather(1, target.unsqueeze(1)).squeeze(1)
    nll = -torch.log(picked.clamp_min(LOG_EPS))
    per_image = (nll * valid).flatten(1).sum(1) / valid.flatten(1).sum(1).clamp_min(1)
    return per_image.mean()


def aggregate_base_foreground(p_b: torch.Tensor,
                              exclude: torch.Tensor | None = None) -> torch.Tensor:
    """Sum of the base foreground channels (equals 1 - background channel).

    ``exclude`` holds one dense id per batch item whose channel is left out, so that
    on a base-class episode the episode's own class does not count as "not the
    target". Id 0 excludes nothing.
    """
    fg = p_b[:, 1:].sum(dim=1, keepdim=True)
    if exclude is None:
        return fg
    idx = exclude.long().to(p_b.device).view(-1, 1, 1, 1).expand(-1, 1, *p_b.shape[-2:])
    own = p_b.gather(1, idx) * (idx > 0)
    return fg - own


def base_argmax_mask(p_b: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest channel
    return p_b.argmax(dim=1)
