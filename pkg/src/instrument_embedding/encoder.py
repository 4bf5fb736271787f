"""Residual frame encoder and learnable-dictionary temporal pooling."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LDE_EPS = 1e-8


@dataclass
class EncoderConfig:
    block_counts: tuple = (3, 4, 6, 3)
    base_width: int = 16
    num_clusters: int = 32
    embedding_dim: int = 512

    @property
    def frame_dim(self) -> int:
        return self.base_width * 2 ** (len(self.block_counts) - 1)

    @property
    def total_stride(self) -> int:
        # stem conv /2, stem max-pool /2, then three strided stages
        return 4 * 2 ** (len(self.block_counts) - 1)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                                          nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class ResNetEncoder(nn.Module):
    """ResNet34-style trunk over (channels x frames) feature maps.

    Returns frame-level vectors of size ``8 * base_width`` after averaging
    out the frequency axis.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if any(int(b) < 1 for b in cfg.block_counts):
            raise ValueError("block_counts must be positive")
        w = cfg.base_width
        self.total_stride = cfg.total_stride
        self.stem = nn.Sequential(nn.Conv2d(1, w, 3, 2, 1, bias=False), nn.BatchNorm2d(w),
                                  nn.ReLU(), nn.MaxPool2d(3, 2, 1))
        stages = []
        in_ch = w
        for i, n_blocks in enumerate(cfg.block_counts):
            out_ch = w * 2 ** i
            blocks = []
            for j in range(int(n_blocks)):
                blocks.append(BasicBlock(in_ch, out_ch, 2 if (j == 0 and i > 0) else 1))
                in_ch = out_ch
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.out_dim = in_ch

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(batch, channels, frames) -> (batch, T, D)."""
        if features.shape[-1] < self.total_stride:
            raise ValueError(
                f"need at least {self.total_stride} frames, got {features.shape[-1]}")
        h = self.stages(self.stem(features.unsqueeze(1)))
        return h.mean(dim=2).transpose(1, 2)


def lde_pool(frames: torch.Tensor, centers: torch.Tensor, scales: torch.Tensor,
             return_weights: bool = False):
    """Learnable dictionary encoding of a frame sequence.

    frames: (..., T, D); centers: (C, D); scales: (C,) positive.
    Returns (..., C, D) per-cluster posterior-weighted mean residuals.
    """
    resid = frames.unsqueeze(-2) - centers  # (..., T, C, D)
    dist = (resid ** 2).sum(-1)
    w = torch.softmax(-scales * dist, dim=-1)  # (..., T, C)
    num = (w.unsqueeze(-1) * resid).sum(-3)
    den = w.sum(-2).unsqueeze(-1) + LDE_EPS
    pooled = num / den
    return (pooled, w) if return_weights else pooled


class LDEPooling(nn.Module):
    def __init__(self, num_clusters: int, dim: int):
        super().__init__()
        self.centers = nn.Parameter(torch.randn(num_clusters, dim) * 0.1)
        # softplus(0.5413) == 1.0
        self.raw_scales = nn.Parameter(torch.full((num_clusters,), 0.5413))

    @property
    def scales(self) -> torch.Tensor:
        return F.softplus(self.raw_scales)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return lde_pool(frames, self.centers, self.scales)


class EmbeddingExtractor(nn.Module):
    """Frame encoder + dictionary pooling + affine projection to the embedding."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ResNetEncoder(cfg)
        self.pool = LDEPooling(cfg.num_clusters, self.encoder.out_dim)
        self.project = nn.Linear(cfg.num_clusters * self.encoder.out_dim, cfg.embedding_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        pooled = self.pool(self.encoder(features))
        return self.project(pooled.flatten(-2))
