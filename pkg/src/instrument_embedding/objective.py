"""Instrument / instrument-family classification heads and their losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def lambda_schedule(iteration: int, base: float = 1000.0, gamma: float = 0.1,
                    floor: float = 5.0) -> float:
    """Annealed mixing weight between plain and margin target logits."""
    return max(floor, base / (1.0 + gamma * iteration))


def chebyshev_cos(cos_theta: torch.Tensor, m: int) -> torch.Tensor:
    """cos(m * theta) as a polynomial in cos(theta)."""
    prev, cur = torch.ones_like(cos_theta), cos_theta
    if m == 0:
        return prev
    for _ in range(m - 1):
        prev, cur = cur, 2 * cos_theta * cur - prev
    return cur


def psi(cos_theta: torch.Tensor, m: int) -> torch.Tensor:
    """Monotone margin function ``(-1)^k cos(m theta) - 2k`` on [k pi/m, (k+1) pi/m]."""
    c = cos_theta.clamp(-1.0, 1.0)
    with torch.no_grad():
        k = torch.floor(m * torch.acos(c) / math.pi).clamp(max=m - 1)
    sign = 1.0 - 2.0 * torch.remainder(k, 2)
    return sign * chebyshev_cos(c, m) - 2.0 * k


class AngularSoftmaxHead(nn.Module):
    """Angular-margin softmax over instrument identities with unit-norm class rows."""

    def __init__(self, embedding_dim: int, num_classes: int, margin: int = 2):
        super().__init__()
        if margin < 1:
            raise ValueError("margin must be >= 1")
        self.margin = int(margin)
        self.weight = nn.Parameter(torch.randn(num_classes, embedding_dim))
        self.renormalize()

    @torch.no_grad()
    def renormalize(self) -> None:
        self.weight.copy_(F.normalize(self.weight, dim=1))

    def cosine(self, emb: torch.Tensor) -> torch.Tensor:
        return F.linear(F.normalize(emb, dim=1), F.normalize(self.weight, dim=1))

    def logits(self, emb: torch.Tensor, labels: torch.Tensor | None = None,
               lam: float = 0.0) -> torch.Tensor:
        """Class logits; with ``labels`` the target logit carries the margin."""
        norm = emb.norm(dim=1, keepdim=True)
        if torch.any(norm == 0):
            raise FloatingPointError("zero-norm embedding in angular softmax")
        cos = self.cosine(emb)
        out = norm * cos
        if labels is None:
            return out
        cos_y = cos.gather(1, labels[:, None])
        target = norm * (lam * cos_y + psi(cos_y, self.margin)) / (1.0 + lam)
        return out.scatter(1, labels[:, None], target)

    def loss(self, emb: torch.Tensor, labels: torch.Tensor, lam: float = 0.0) -> torch.Tensor:
        return F.cross_entropy(self.logits(emb, labels, lam), labels)


def asoftmax_loss(emb: torch.Tensor, labels: torch.Tensor, head: AngularSoftmaxHead,
                  lam: float = 0.0) -> torch.Tensor:
    return head.loss(emb, labels, lam)


class SoftmaxHead(nn.Module):
    """Plain affine softmax classifier (family head; instrument head when ablated)."""

    def __init__(self, embedding_dim: int, num_classes: int):
        super().__init__()
        self.linear = nn.Linear(embedding_dim, num_classes)

    def logits(self, emb, labels=None, lam=0.0):
        return self.linear(emb)

    def loss(self, emb, labels, lam=0.0):
        return F.cross_entropy(self.linear(emb), labels)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    instr_loss: torch.Tensor
    family_loss: torch.Tensor
    family_weight: float

    def as_floats(self) -> dict:
        return {"total": self.total.item(), "instr_loss": self.instr_loss.item(),
                "family_loss": self.family_loss.item(), "family_weight": self.family_weight}


class DualHead(nn.Module):
    """Instrument head (angular or plain softmax) plus optional family head."""

    def __init__(self, embedding_dim: int, num_instruments: int, num_families: int,
                 a_softmax: bool = True, family_head: bool = True, margin: int = 2):
        super().__init__()
        if a_softmax:
            self.instrument = AngularSoftmaxHead(embedding_dim, num_instruments, margin)
        else:
            self.instrument = SoftmaxHead(embedding_dim, num_instruments)
        self.family = SoftmaxHead(embedding_dim, num_families) if family_head else None

    @property
    def num_instruments(self) -> int:
        if isinstance(self.instrument, AngularSoftmaxHead):
            return self.instrument.weight.shape[0]
        return self.instrument.linear.out_features

    @property
    def num_families(self) -> int:
        return 0 if self.family is None else self.family.linear.out_features

    def after_step(self) -> None:
        if isinstance(self.instrument, AngularSoftmaxHead):
            self.instrument.renormalize()


def multitask_loss(emb: torch.Tensor, instr_labels: torch.Tensor,
                   family_labels: torch.Tensor | None, heads: DualHead,
                   lam: float = 0.0, family_weight: float = 1.0) -> LossBreakdown:
    """Instrument loss plus weighted family loss (zero when the family head is off)."""
    n_instr = heads.num_instruments
    if instr_labels.numel() and (instr_labels.min() < 0 or instr_labels.max() >= n_instr):
        raise KeyError("instrument label outside the head's class map")
    instr = heads.instrument.loss(emb, instr_labels, lam)
    if heads.family is None:
        fam = torch.zeros((), dtype=emb.dtype)
    else:
        if family_labels is None:
            raise KeyError("family labels required when the family head is enabled")
        if family_labels.min() < 0 or family_labels.max() >= heads.num_families:
            raise KeyError("family label outside the head's class map")
        fam = heads.family.loss(emb, family_labels)
    return LossBreakdown(instr + family_weight * fam, instr, fam, family_weight)
