"""Training objectives: mask L1, frame-weighted mask L1, detection cross-entropy, composite."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .dsp import InvalidInputError
from .weigher import apply_weights

DEFAULT_LAMBDAS = (0.1, 1.0, 0.1)
SCORE_CLIP = 1e-7


@dataclass
class LossBreakdown:
    l_asd: torch.Tensor
    l_ss: torch.Tensor
    l_w: torch.Tensor
    total: torch.Tensor
    lambdas: tuple

    def as_floats(self) -> dict:
        return {k: float(torch.as_tensor(getattr(self, k)).detach())
                for k in ("l_asd", "l_ss", "l_w", "total")}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_floats().values())


def _pair(a, b):
    a = torch.as_tensor(a)
    b = torch.as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def frame_l1(m_pred, m_gt):
    """Per-frame L1: mean over the frequency axis (second to last), shape (..., T)."""
    m_pred, m_gt = _pair(m_pred, m_gt)
    return (m_pred - m_gt).abs().mean(dim=-2)


def separation_loss(m_pred, m_gt):
    """Mean absolute mask error: over frequency, then frames, then batch items."""
    return frame_l1(m_pred, m_gt).mean(dim=-1).mean()


def weighted_separation_loss(m_pred, m_gt, weights):
    """Per-frame L1 combined with per-frame weights; unit weights reproduce :func:`separation_loss`."""
    return apply_weights(frame_l1(m_pred, m_gt), weights)


def asd_loss(scores, labels):
    """Mean binary cross-entropy over every frame of every track.

    Scores must lie in [0, 1]; they are clipped to ``[1e-7, 1 - 1e-7]`` so that
    saturated sigmoids stay finite.
    """
    scores, labels = _pair(scores, labels)
    if not torch.isfinite(scores).all() or (scores < 0).any() or (scores > 1).any():
        raise FloatingPointError("detection scores must be finite and inside [0, 1]")
    p = scores.clamp(SCORE_CLIP, 1 - SCORE_CLIP)
    return -(labels * torch.log(p) + (1 - labels) * torch.log1p(-p)).mean()


def total_loss(l_asd, l_ss, l_w, lambdas=DEFAULT_LAMBDAS) -> LossBreakdown:
    l1, l2, l3 = lambdas
    l_asd, l_ss, l_w = (torch.as_tensor(x) for x in (l_asd, l_ss, l_w))
    total = l1 * l_asd + l2 * l_ss + l3 * l_w
    return LossBreakdown(l_asd, l_ss, l_w, total, tuple(float(x) for x in lambdas))
