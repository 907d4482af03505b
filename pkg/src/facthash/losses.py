"""Photometric, opacity-entropy and distortion losses, and their weighted sum.

Per-ray and per-sample terms are averaged rather than summed so the loss
weights do not depend on the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

LAMBDA_OP = 1e-3
LAMBDA_DIST = 1e-2
ENTROPY_EPS = 1e-10


@dataclass(frozen=True)
class LossWeights:
    lambda_op: float = LAMBDA_OP
    lambda_dist: float = LAMBDA_DIST

    def __post_init__(self):
        if self.lambda_op < 0 or self.lambda_dist < 0:
            raise ValueError("loss weights must be nonnegative")


def loss_rgb(pred, target) -> torch.Tensor:
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"batch shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).sum(dim=-1).mean()


def loss_opacity(alphas, mask=None) -> torch.Tensor:
    """Mean of ``-alpha * log(max(alpha, eps))`` over the (masked) samples."""
    a = torch.as_tensor(alphas)
    ent = -a * torch.log(a.clamp(min=ENTROPY_EPS))
    if mask is None:
        return ent.mean() if ent.numel() else ent.sum()
    n = mask.sum()
    return (ent * mask).sum() / n.clamp(min=1)


def _check_sorted(s: torch.Tensor):
    if s.shape[-1] > 1 and (torch.diff(s, dim=-1) < 0).any():
        raise ValueError("distortion loss needs midpoints sorted along each ray")


def distortion_naive(w, s, ds) -> torch.Tensor:
    """Per-ray ``sum_ij w_i w_j |s_i - s_j| + 1/3 sum_i w_i^2 ds_i`` by the double sum."""
    w, s, ds = (torch.as_tensor(a) for a in (w, s, ds))
    pair = (w[..., :, None] * w[..., None, :] * (s[..., :, None] - s[..., None, :]).abs()).sum(dim=(-1, -2))
    return pair + (w * w * ds).sum(dim=-1) / 3.0


def distortion_efficient(w, s, ds) -> torch.Tensor:
    """Same quantity in O(K) using exclusive prefix sums of ``w`` and ``w * s``."""
    w, s, ds = (torch.as_tensor(a) for a in (w, s, ds))
    ws = w * s
    w_before = torch.cumsum(w, dim=-1) - w
    ws_before = torch.cumsum(ws, dim=-1) - ws
    pair = 2.0 * (w * (s * w_before - ws_before)).sum(dim=-1)
    return pair + (w * w * ds).sum(dim=-1) / 3.0


def loss_distortion(weights, midpoints, intervals, efficient: bool = True, check: bool = True) -> torch.Tensor:
    """Mean over rays of the distortion term; inputs are ``(R, K)`` or ``(K,)``."""
    s = torch.as_tensor(midpoints)
    if check:
        _check_sorted(s)
    fn = distortion_efficient if efficient else distortion_naive
    per_ray = fn(weights, s, intervals)
    return per_ray.mean() if per_ray.ndim else per_ray


def loss_total(rgb, op, dist, weights: LossWeights = LossWeights()):
    return rgb + weights.lambda_op * op + weights.lambda_dist * dist
