"""Shared four-block convolutional encoder with per-block taps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn


class BlockFeatures(NamedTuple):
    b1: torch.Tensor
    b2: torch.Tensor
    b3: torch.Tensor
    b4: torch.Tensor

    def tap(self, name: str) -> torch.Tensor:
        return getattr(self, name.lower())


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple = (16, 32, 64, 128)
    strides: tuple = (2, 2, 1, 2)
    groups: int = 4
    frozen: bool = False

    def __post_init__(self):
        if len(self.channels) != 4 or len(self.strides) != 4:
            raise ValueError("encoder has exactly four blocks")


def conv_block(cin: int, cout: int, stride: int, groups: int) -> nn.Sequential:
    g = groups if cout % groups == 0 else 1
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(g, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.GroupNorm(g, cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        cin = 3
        blocks = []
        for cout, stride in zip(config.channels, config.strides):
            blocks.append(conv_block(cin, cout, stride, config.groups))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.frozen = False
        self.set_frozen(config.frozen)

    def set_frozen(self, flag: bool) -> None:
        """Stop (or restart) gradient flow into the encoder. Forward is unaffected."""
        self.frozen = bool(flag)
        for p in self.parameters():
            p.requires_grad_(not self.frozen)

    def forward(self, image: torch.Tensor) -> BlockFeatures:
        if image.shape[-1] < 32 or image.shape[-2] < 32:
            raise ValueError(f"input must be at least 32x32, got {tuple(image.shape[-2:])}")
        if not torch.isfinite(image).all():
            raise ValueError("non-finite values in encoder input")
        feats = []
        x = image
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return BlockFeatures(*feats)

