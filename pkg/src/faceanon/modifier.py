"""Residual encoder/decoder face modifier with instance normalization."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass
class ModifierConfig:
    n_blocks: int = 9
    base_channels: int = 64
    work_size: int = 256

    @classmethod
    def desk(cls) -> "ModifierConfig":
        return cls(n_blocks=2, base_channels=16, work_size=32)


class ResidualBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.body(x)


class ModifierNetwork(nn.Module):
    """Maps ``(N, 3, S, S)`` faces in [0, 1] to same-shape anonymized faces in [0, 1].

    Two stride-2 downsampling convs, ``n_blocks`` residual blocks, two transposed
    convs back up, tanh. Instance norm keeps every sample independent of the batch.
    """

    def __init__(self, config: ModifierConfig | None = None):
        super().__init__()
        self.config = config or ModifierConfig()
        b = self.config.base_channels
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, b, 7),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
        ]
        ch = b
        for _ in range(2):
            layers += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(self.config.n_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    @property
    def work_size(self) -> int:
        return self.config.work_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.config.work_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ValueError(f"modifier expects (N, 3, {s}, {s}) input, got {tuple(x.shape)}")
        # [0,1] <-> [-1,1] at the network boundary
        y = self.net(x * 2 - 1)
        return (y + 1) / 2

    def modify(self, crop: torch.Tensor) -> torch.Tensor:
        """Single ``(3, S, S)`` crop convenience wrapper."""
        return self.forward(crop[None])[0]
