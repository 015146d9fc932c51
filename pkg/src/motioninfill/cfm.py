"""Conditional flow matching on the linear noise-to-data path.

Every function accepts numpy arrays or torch tensors (anything supporting
elementwise arithmetic, ``abs`` and ``sum``/``mean`` with ``axis``) so the
same code serves training (autograd) and numpy-side checks. Arrays carry
optional leading batch dimensions: motion is ``(..., T, C)`` and masks are
``(..., T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LossWeights",
    "interpolate",
    "target_velocity",
    "cfm_loss",
    "estimate_x1",
    "ts_loss",
    "total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    lambda_ts: float = 0.2

    def __post_init__(self):
        if not self.lambda_ts >= 0:
            raise ValueError(f"lambda_ts must be non-negative, got {self.lambda_ts}")


def _check_same_shape(*arrays):
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _check_time(t):
    if isinstance(t, (int, float)) and not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time must lie in [0, 1], got {t}")


def _as_frame_column(t, like):
    # scalars broadcast as-is; per-item times (B,) become (B, 1, 1)
    if isinstance(t, (int, float)):
        return t
    return t.reshape(tuple(t.shape) + (1,) * (like.ndim - t.ndim))


def interpolate(x0, x1, t):
    """Point ``(1 - t) * x0 + t * x1`` on the straight path."""
    _check_same_shape(x0, x1)
    _check_time(t)
    t = _as_frame_column(t, x0)
    return (1 - t) * x0 + t * x1


def target_velocity(x0, x1):
    _check_same_shape(x0, x1)
    return x1 - x0


def _frame_weights(mask, like):
    if isinstance(like, np.ndarray):
        return np.asarray(mask, dtype=like.dtype)
    import torch

    return torch.as_tensor(mask, device=like.device).to(like.dtype)


def cfm_loss(v_pred, x0, x1, mask):
    """Mean squared velocity error over masked frames only.

    The mean runs over every channel of every masked frame (across the
    batch), so values at unmasked frames never affect the result.
    """
    _check_same_shape(v_pred, x0, x1)
    if tuple(mask.shape) != tuple(v_pred.shape[:-1]):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match frames {tuple(v_pred.shape[:-1])}")
    w = _frame_weights(mask, v_pred)
    n = w.sum()
    if float(n) == 0:
        raise ValueError("mask selects no frames; the loss has no supervised positions")
    residual = v_pred - (x1 - x0)
    per_frame = (residual * residual).sum(axis=-1)
    return (per_frame * w).sum() / (n * v_pred.shape[-1])


def estimate_x1(xt, v_pred, t):
    """One-step extrapolation ``xt + (1 - t) * v_pred`` of the flow to t = 1."""
    _check_same_shape(xt, v_pred)
    t = _as_frame_column(t, xt)
    return xt + (1 - t) * v_pred


def ts_loss(x1_hat, valid=None):
    """Mean L1 norm of consecutive-frame differences.

    ``valid`` optionally flags real (non-padding) frames; only pairs whose
    two frames are both valid contribute. With leading batch dimensions the
    per-sequence values are averaged.
    """
    if x1_hat.shape[-2] < 2:
        raise ValueError("temporal smoothness needs at least two frames")
    step = abs(x1_hat[..., 1:, :] - x1_hat[..., :-1, :]).sum(axis=-1)
    if valid is None:
        return step.mean()
    pair = _frame_weights(valid, x1_hat)
    pair = pair[..., 1:] * pair[..., :-1]
    counts = pair.sum(axis=-1)
    if float(counts.min()) == 0:
        raise ValueError("every sequence needs at least two valid frames")
    return ((step * pair).sum(axis=-1) / counts).mean()


def total_loss(cfm, ts, weights=LossWeights()):
    return cfm + weights.lambda_ts * ts
