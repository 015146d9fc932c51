"""Euler ODE sampling with the sway timestep schedule, and EMA weight tracking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .motion_core import SpeechFeatureSequence, TemporalMask

__all__ = [
    "SamplerConfig",
    "EmaState",
    "SamplerError",
    "sway_schedule",
    "initial_noise",
    "euler_solve",
    "ema_init",
    "ema_update",
]


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 32
    sway_s: float = -1.0
    seed: int = 0
    renoise_context: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not -1.0 <= self.sway_s <= 0.0:
            raise ValueError(f"sway coefficient must lie in [-1, 0], got {self.sway_s}")


def sway_schedule(n_steps, s=-1.0):
    """Flow times ``t_i = u_i + s * (cos(pi * u_i / 2) - 1 + u_i)`` on ``u_i = i / n_steps``.

    Negative ``s`` concentrates steps near ``t = 0``; the endpoints are exactly 0 and 1.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not -1.0 <= s <= 0.0:
        raise ValueError(f"sway coefficient must lie in [-1, 0], got {s}")
    u = np.arange(n_steps + 1, dtype=np.float64) / n_steps
    if s == 0:
        return u
    t = u + s * (np.cos(np.pi / 2 * u) - 1 + u)
    t[0], t[-1] = 0.0, 1.0
    return t


def initial_noise(shape, seed, dtype=torch.float32):
    """Seeded standard Gaussian starting point shared by the solver and its tests."""
    rng = np.random.default_rng(seed)
    return torch.as_tensor(rng.standard_normal(shape), dtype=dtype)


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.array(x), dtype=dtype)


def euler_solve(velocity_fn, orig_placed, mask, speech, cfg=SamplerConfig()):
    """Integrate ``dx/dt = v(x, t)`` from noise at t=0 to t=1 over the masked frames.

    Parameters
    ----------
    velocity_fn : callable
        ``velocity_fn(x_t, t, masked_cond, speech) -> v`` on batched torch
        tensors ``(B, T, C)``; ``t`` is a Python float.
    orig_placed : array, shape (T, C) or (B, T, C)
        Known frames laid out on the target timeline; masked rows are ignored.
    mask : TemporalMask or bool array, shape (T,) or (B, T)
        ``True`` marks frames to synthesize.
    speech : SpeechFeatureSequence, array or tensor
        Passed to ``velocity_fn`` unchanged except for adding a batch axis.

    Returns
    -------
    Array of the same type and shape as ``orig_placed`` whose unmasked rows
    are bit-identical to the input.
    """
    as_numpy = not isinstance(orig_placed, torch.Tensor)
    orig = _as_tensor(orig_placed)
    if not orig.is_floating_point():
        orig = orig.to(torch.float32)
    flags = mask.flags if isinstance(mask, TemporalMask) else mask
    m = _as_tensor(flags).to(torch.bool)
    squeeze = orig.ndim == 2
    if squeeze:
        orig, m = orig[None], m[None]
    if tuple(m.shape) != tuple(orig.shape[:2]):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match frames {tuple(orig.shape[:2])}")
    if isinstance(speech, SpeechFeatureSequence):
        speech = speech.feats
    speech = _as_tensor(speech, orig.dtype)
    if speech.ndim == 2:
        speech = speech[None]

    if not bool(m.any()):
        out = orig[0] if squeeze else orig
        return out.numpy().copy() if as_numpy else out.clone()
    m3 = m[..., None]
    zeros = torch.zeros((), dtype=orig.dtype)
    masked_cond = torch.where(m3, zeros, orig)
    noise = initial_noise(tuple(orig.shape), cfg.seed, orig.dtype)
    times = sway_schedule(cfg.n_steps, cfg.sway_s)
    x = noise.clone()
    with torch.no_grad():
        for i in range(cfg.n_steps):
            t, t_next = float(times[i]), float(times[i + 1])
            context = (1 - t) * noise + t * orig if cfg.renoise_context else orig
            x = torch.where(m3, x, context)
            v = velocity_fn(x, t, masked_cond, speech)
            if not torch.isfinite(v).all():
                raise SamplerError(f"velocity field returned non-finite values at step {i} (t={t:.4f})")
            x = x + (t_next - t) * v
    out = torch.where(m3, x, orig)
    if squeeze:
        out = out[0]
    return out.numpy() if as_numpy else out


@dataclass(frozen=True)
class EmaState:
    shadow: dict
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")


def _detached_copy(value):
    if isinstance(value, torch.Tensor):
        return value.detach().clone()
    return np.array(value, copy=True)


def ema_init(params, decay=0.999):
    return EmaState({k: _detached_copy(v) for k, v in params.items()}, decay)


def ema_update(params, state):
    """``shadow <- decay * shadow + (1 - decay) * params`` for every named tensor."""
    if params.keys() != state.shadow.keys():
        missing = sorted(set(params) ^ set(state.shadow))
        raise ValueError(f"parameter names differ from the EMA shadow: {missing[:5]}")
    d = state.decay
    shadow = {}
    for name, p in params.items():
        s = state.shadow[name]
        if tuple(p.shape) != tuple(s.shape):
            raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(s.shape)}")
        if isinstance(p, torch.Tensor):
            p = p.detach()
            if not p.is_floating_point():
                shadow[name] = p.clone()
                continue
        shadow[name] = d * s + (1 - d) * p
    return EmaState(shadow, d)
