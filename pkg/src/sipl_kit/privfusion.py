"""Privileged-feature fusion mechanisms.

Two mutually exclusive ways of letting ground-truth-derived features guide
restoration:

* the vanilla scalar blend ``(1 - alpha) * F_d + alpha * F_pi`` under a
  decaying ``AlphaSchedule`` (training-only; alpha is 0 at inference), and
* ``ProxyFusion`` -- a learnable dictionary of N prior tokens that first
  distills privileged features through cross-attention (dictionary rows as
  queries) and then lets degraded-image tokens query the distilled priors.

The fusion is residual with a zero-initialized output projection, so a fresh
model behaves identically with and without a privileged input, and the
``bypass`` path (no privileged image at all) is exact by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeMismatch

PI_MODES = ("none", "self", "gt")
FUSION_MODES = ("none", "blend", "proxy")


@dataclass
class AlphaSchedule:
    """Decaying blend coefficient; reaches exactly 0 at end_fraction of training."""

    alpha0: float = 0.9
    decay: str = "linear"  # or "cosine"
    end_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ValueError(f"alpha0 must be in [0,1], got {self.alpha0}")
        if self.decay not in ("linear", "cosine"):
            raise ValueError(f"unknown decay {self.decay!r}")
        if not 0.0 < self.end_fraction <= 1.0:
            raise ValueError(f"end_fraction must be in (0,1], got {self.end_fraction}")


def alpha_at(schedule: AlphaSchedule, epoch: int, total_epochs: int) -> float:
    """Blend coefficient for one epoch; non-increasing, 0 from end_fraction on."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    horizon = schedule.end_fraction * total_epochs
    progress = epoch / horizon
    if progress >= 1.0:
        return 0.0
    if schedule.decay == "linear":
        alpha = schedule.alpha0 * (1.0 - progress)
    else:
        alpha = schedule.alpha0 * 0.5 * (1.0 + math.cos(math.pi * progress))
    return min(max(alpha, 0.0), 1.0)


def blend_pl(f_d: torch.Tensor, f_pi: torch.Tensor, alpha: float) -> torch.Tensor:
    """Scalar blend of degraded and privileged features.

    alpha == 0 and alpha == 1 return the respective input bitwise (the
    inference-time and full-privilege limits are exact, not approximate).
    """
    if f_d.shape != f_pi.shape:
        raise ShapeMismatch(f"blend_pl shapes differ: {tuple(f_d.shape)} vs {tuple(f_pi.shape)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    if alpha == 0.0:
        return f_d
    if alpha == 1.0:
        return f_pi
    return (1.0 - alpha) * f_d + alpha * f_pi


def bypass(f_d: torch.Tensor) -> torch.Tensor:
    """No-privilege pathway: identity on the degraded features."""
    return f_d


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, n_heads: int):
    """Scaled dot-product attention over the last two axes.

    q: (..., Lq, C), k/v: (..., Lk, C). Returns (output, probabilities) with
    probabilities shaped (..., heads, Lq, Lk). Scale is 1/sqrt(head dim).
    """
    c = q.shape[-1]
    if n_heads == 1:
        scores = (q @ k.transpose(-1, -2)) * (c ** -0.5)
        probs = torch.softmax(scores, dim=-1)
        return probs @ v, probs.unsqueeze(-3)
    if c % n_heads:
        raise ShapeMismatch(f"channels {c} not divisible by {n_heads} heads")
    hd = c // n_heads
    def split(x):
        return x.reshape(*x.shape[:-1], n_heads, hd).transpose(-2, -3)
    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ kh.transpose(-1, -2)) * (hd ** -0.5)
    probs = torch.softmax(scores, dim=-1)
    out = probs @ vh
    out = out.transpose(-2, -3).reshape(*q.shape[:-1], c)
    return out, probs


class ProxyFusion(nn.Module):
    """Learnable privileged dictionary with two cross-attention stages.

    Stage 1 (distill): the N x C dictionary queries privileged features,
    producing one distilled prior row per dictionary entry. Stage 2 (fuse):
    degraded-image tokens query the distilled priors; the attended result is
    projected by a zero-initialized output matrix and added residually, so
    fusion starts as an exact identity on the degraded features.

    The dictionary and all projections persist in checkpoints (pd.*) and are
    loaded at inference, where the model's own outputs stand in for the
    privileged image.
    """

    def __init__(self, n_entries: int = 64, channels: int = 64, n_heads: int = 1,
                 generator: torch.Generator | None = None):
        super().__init__()
        if n_entries < 1:
            raise ValueError("dictionary needs at least one entry")
        self.n_entries = n_entries
        self.channels = channels
        self.n_heads = n_heads
        c = channels
        bound = 1.0 / math.sqrt(c)

        def proj():
            w = torch.empty(c, c)
            w.uniform_(-bound, bound, generator=generator)
            return nn.Parameter(w)

        matrix = torch.empty(n_entries, c)
        matrix.normal_(0.0, 0.02, generator=generator)
        self.matrix = nn.Parameter(matrix)
        self.wq1, self.wk1, self.wv1 = proj(), proj(), proj()
        self.wq2, self.wk2, self.wv2 = proj(), proj(), proj()
        self.wo = nn.Parameter(torch.zeros(c, c))

    def _check_tokens(self, x: torch.Tensor, what: str):
        if x.shape[-1] != self.channels:
            raise ShapeMismatch(
                f"{what} has {x.shape[-1]} channels, dictionary expects {self.channels}")

    def distill(self, f_pi: torch.Tensor, return_weights: bool = False):
        """Dictionary rows attend over privileged tokens -> N x C distilled priors."""
        self._check_tokens(f_pi, "privileged features")
        q = self.matrix @ self.wq1
        k = f_pi @ self.wk1
        v = f_pi @ self.wv1
        out, probs = _attend(q, k, v, self.n_heads)
        return (out, probs) if return_weights else out

    def forward(self, f_d: torch.Tensor, f_pi: torch.Tensor) -> torch.Tensor:
        """Fuse degraded tokens with priors distilled from privileged tokens."""
        self._check_tokens(f_d, "degraded features")
        priors = self.distill(f_pi)
        q = f_d @ self.wq2
        k = priors @ self.wk2
        v = priors @ self.wv2
        attended, _ = _attend(q, k, v, self.n_heads)
        return f_d + attended @ self.wo

    def attention_maps(self, f_d: torch.Tensor, f_pi: torch.Tensor):
        """Probability matrices of both stages, for inspection and tests."""
        priors, p1 = self.distill(f_pi, return_weights=True)
        q = f_d @ self.wq2
        _, p2 = _attend(q, priors @ self.wk2, priors @ self.wv2, self.n_heads)
        return p1, p2

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
