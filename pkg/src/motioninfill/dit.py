"""Diffusion Transformer velocity network for masked motion infilling.

Input construction: the noisy motion and the masked (context) motion are
concatenated along channels, projected to ``d_model`` and passed through a
residual depthwise-convolution positional embedding. Each block applies,
under timestep-driven adaptive layer-norm modulation with zero-initialised
gates: windowed self-attention, windowed cross-attention to projected speech
features and a feed-forward layer. Rotary position embeddings are used in
both attention types; for cross-attention the speech positions are rescaled
onto the motion time axis.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .motion_core import MOTION_WIDTH

__all__ = [
    "DiTConfig",
    "MotionDiT",
    "build_self_bias",
    "build_cross_bias",
    "biased_attention",
    "apply_rope",
    "timestep_embedding",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class DiTConfig:
    """Architecture hyperparameters. A window of ``None`` means unbounded."""

    n_layers: int = 22
    n_heads: int = 16
    d_model: int = 1024
    d_ffn: int = 2024
    self_window: int | None = 8
    cross_window: int | None = 8
    rope_scale: float = 1.0
    motion_width: int = MOTION_WIDTH
    speech_dim: int = 768
    conv_kernel: int = 31
    time_freq_dim: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("per-head dimension must be even for rotary embeddings")
        for name in ("self_window", "cross_window"):
            w = getattr(self, name)
            if w is not None and w < 1:
                raise ValueError(f"{name} must be >= 1 or None, got {w}")
        if self.rope_scale <= 0:
            raise ValueError("rope_scale must be positive")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        for name in ("n_layers", "n_heads", "d_model", "d_ffn", "motion_width", "speech_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @classmethod
    def toy(cls, speech_dim=32, n_layers=4, **overrides):
        """Small preset used by the tests and the synthetic benchmark."""
        params = dict(n_layers=n_layers, n_heads=4, d_model=128, d_ffn=256,
                      self_window=8, cross_window=8, speech_dim=speech_dim)
        params.update(overrides)
        return cls(**params)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, obj):
        return cls(**obj)


def build_self_bias(T, w):
    """``0`` where ``i - w <= j < i + w`` and ``-inf`` elsewhere."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if w is None:
        return np.zeros((T, T))
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    admitted = (i - w <= j) & (j < i + w)
    return np.where(admitted, 0.0, -np.inf)


def cross_centers(T_q, N_k):
    """Key index aligned with each query: ``round(i * N_k / T_q)`` clipped."""
    # floor(x + 0.5) keeps the half-way rule independent of numpy's banker's rounding
    c = np.floor(np.arange(T_q) * N_k / T_q + 0.5).astype(int)
    return np.clip(c, 0, N_k - 1)


def build_cross_bias(T_q, N_k, w_c):
    if T_q < 1 or N_k < 1:
        raise ValueError("T_q and N_k must be >= 1")
    if w_c is None:
        return np.zeros((T_q, N_k))
    if w_c < 1:
        raise ValueError(f"window must be >= 1, got {w_c}")
    c = cross_centers(T_q, N_k)[:, None]
    j = np.arange(N_k)[None, :]
    admitted = (c - w_c <= j) & (j < c + w_c)
    return np.where(admitted, 0.0, -np.inf)


@lru_cache(maxsize=256)
def _padded_bias(kind, n_q, n_k, len_q, len_k, window):
    """Bias for one sequence of valid lengths ``len_q``/``len_k`` inside a padded batch."""
    out = np.full((len_q, len_k), -np.inf)
    if kind == "self":
        out[:n_q, :n_k] = build_self_bias(n_q, window)
    else:
        out[:n_q, :n_k] = build_cross_bias(n_q, n_k, window)
    # padded query rows: attend to the first key so the softmax stays finite (outputs are ignored)
    out[n_q:, :] = -np.inf
    out[n_q:, 0] = 0.0
    return out


def biased_attention(q, k, v, bias, return_weights=False):
    """``softmax(q k^T / sqrt(d_k) + bias) v`` for ``(..., T, d_k)`` inputs."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"incompatible shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    if tuple(bias.shape[-2:]) != (q.shape[-2], k.shape[-2]):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match ({q.shape[-2]}, {k.shape[-2]})")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]) + bias
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def rope_angles(positions, dim, theta=10000.0):
    """Rotation angles ``(..., T, dim // 2)`` for real-valued positions."""
    freqs = theta ** (-torch.arange(0, dim, 2, dtype=positions.dtype, device=positions.device) / dim)
    return positions[..., None] * freqs


def apply_rope(x, angles):
    """Rotate channel pairs ``(x[2m], x[2m+1])`` of ``x`` (..., T, dim) by ``angles``."""
    cos, sin = angles.cos(), angles.sin()
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack((x_even * cos - x_odd * sin, x_even * sin + x_odd * cos), dim=-1)
    return rotated.flatten(-2)


def timestep_embedding(t, dim, max_period=10000.0, scale=1000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = scale * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class ConvPositionEmbedding(nn.Module):
    def __init__(self, dim, kernel):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(dim, dim, kernel, padding=pad, groups=dim)
        self.conv2 = nn.Conv1d(dim, dim, kernel, padding=pad, groups=dim)

    def forward(self, x, valid):
        # x: (B, T, d), valid: (B, T) float
        h = (x * valid[..., None]).transpose(1, 2)
        h = F.gelu(self.conv1(h))
        h = h * valid[:, None]
        h = F.gelu(self.conv2(h))
        return x + h.transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, dim, n_heads, cross=False):
        super().__init__()
        self.n_heads = n_heads
        self.cross = cross
        if cross:
            self.q = nn.Linear(dim, dim)
            self.kv = nn.Linear(dim, 2 * dim)
        else:
            self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def _heads(self, x):
        B, T, _ = x.shape
        return x.view(B, T, self.n_heads, -1).transpose(1, 2)

    def forward(self, x, bias, q_angles, k_angles, context=None, attention_fn=biased_attention):
        if self.cross:
            q = self.q(x)
            k, v = self.kv(context).chunk(2, dim=-1)
        else:
            q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        q = apply_rope(q, q_angles[:, None])
        k = apply_rope(k, k_angles[:, None])
        h = attention_fn(q, k, v, bias[:, None])
        B, _, T, _ = h.shape
        return self.out(h.transpose(1, 2).reshape(B, T, -1))


class DiTBlock(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        d = cfg.d_model
        self.norm_self = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.self_attn = Attention(d, cfg.n_heads)
        self.norm_cross = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.cross_attn = Attention(d, cfg.n_heads, cross=True)
        self.norm_ffn = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.d_ffn), nn.GELU(approximate="tanh"), nn.Linear(cfg.d_ffn, d))
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(d, 9 * d))

    def forward(self, x, c, speech, biases, angles, attention_fn=biased_attention):
        (sh_sa, sc_sa, g_sa, sh_ca, sc_ca, g_ca, sh_ff, sc_ff, g_ff) = self.modulation(c).chunk(9, dim=-1)
        h = modulate(self.norm_self(x), sh_sa, sc_sa)
        x = x + g_sa[:, None] * self.self_attn(h, biases[0], angles[0], angles[0], attention_fn=attention_fn)
        h = modulate(self.norm_cross(x), sh_ca, sc_ca)
        x = x + g_ca[:, None] * self.cross_attn(h, biases[1], angles[0], angles[1], context=speech,
                                                attention_fn=attention_fn)
        h = modulate(self.norm_ffn(x), sh_ff, sc_ff)
        return x + g_ff[:, None] * self.ffn(h)


class MotionDiT(nn.Module):
    """Velocity field ``v(x_t, t; speech, masked_context)``.

    Call with batched tensors::

        noisy, masked_cond: (B, T, 75)   t: (B,) or float
        speech: (B, N, D)
        frame_valid: (B, T) bool, speech_valid: (B, N) bool (optional padding flags)

    and receive the predicted velocity ``(B, T, 75)``.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.in_proj = nn.Linear(2 * cfg.motion_width, d)
        self.pos_conv = ConvPositionEmbedding(d, cfg.conv_kernel)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_freq_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.speech_proj = nn.Linear(cfg.speech_dim, d)
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.n_layers))
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.out_modulation = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.head = nn.Linear(d, cfg.motion_width)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.time_mlp[0].weight, std=0.02)
        nn.init.normal_(self.time_mlp[2].weight, std=0.02)
        # adaLN-zero: every block and the output head start as identity / zero
        for block in self.blocks:
            nn.init.zeros_(block.modulation[-1].weight)
            nn.init.zeros_(block.modulation[-1].bias)
        nn.init.zeros_(self.out_modulation[-1].weight)
        nn.init.zeros_(self.out_modulation[-1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _biases_and_angles(self, B, T, N, frame_valid, speech_valid, dtype, device):
        cfg = self.cfg
        t_len = frame_valid.sum(1).tolist()
        n_len = speech_valid.sum(1).tolist()
        self_bias = np.stack([_padded_bias("self", int(a), int(a), T, T, cfg.self_window) for a in t_len])
        cross_bias = np.stack([_padded_bias("cross", int(a), int(b), T, N, cfg.cross_window)
                               for a, b in zip(t_len, n_len)])
        # padded speech keys are always excluded; the -inf prefill above already guarantees that
        q_pos = torch.arange(T, dtype=dtype, device=device).expand(B, T) / cfg.rope_scale
        ratio = torch.tensor([a / b for a, b in zip(t_len, n_len)], dtype=dtype, device=device)
        k_pos = torch.arange(N, dtype=dtype, device=device)[None] * ratio[:, None] / cfg.rope_scale
        angles = (rope_angles(q_pos, cfg.head_dim), rope_angles(k_pos, cfg.head_dim))
        biases = (torch.as_tensor(self_bias, dtype=dtype, device=device),
                  torch.as_tensor(cross_bias, dtype=dtype, device=device))
        return biases, angles

    def forward(self, noisy, masked_cond, t, speech, frame_valid=None, speech_valid=None,
                attention_fn=biased_attention):
        cfg = self.cfg
        if noisy.shape != masked_cond.shape:
            raise ValueError(f"noisy {tuple(noisy.shape)} and masked_cond {tuple(masked_cond.shape)} differ")
        if noisy.ndim != 3 or noisy.shape[-1] != cfg.motion_width:
            raise ValueError(f"motion inputs must be (B, T, {cfg.motion_width}), got {tuple(noisy.shape)}")
        if speech.ndim != 3 or speech.shape[0] != noisy.shape[0] or speech.shape[-1] != cfg.speech_dim:
            raise ValueError(f"speech must be (B, N, {cfg.speech_dim}), got {tuple(speech.shape)}")
        if speech.shape[1] < 1:
            raise ValueError("speech features must be non-empty")
        for name, value in (("noisy", noisy), ("masked_cond", masked_cond), ("speech", speech)):
            if not torch.isfinite(value).all():
                raise ValueError(f"{name} contains non-finite values")
        B, T, _ = noisy.shape
        N = speech.shape[1]
        dtype, device = noisy.dtype, noisy.device
        if frame_valid is None:
            frame_valid = torch.ones(B, T, dtype=torch.bool, device=device)
        if speech_valid is None:
            speech_valid = torch.ones(B, N, dtype=torch.bool, device=device)
        if not isinstance(t, torch.Tensor):
            t = torch.tensor(float(t), dtype=dtype, device=device)
        t = t.to(dtype).reshape(-1).expand(B)

        biases, angles = self._biases_and_angles(B, T, N, frame_valid, speech_valid, dtype, device)
        fv = frame_valid.to(dtype)
        x = self.in_proj(torch.cat([noisy, masked_cond], dim=-1))
        x = self.pos_conv(x, fv)
        c = self.time_mlp(timestep_embedding(t, cfg.time_freq_dim))
        ctx = self.speech_proj(speech)
        for block in self.blocks:
            x = block(x, c, ctx, biases, angles, attention_fn=attention_fn)
        shift, scale = self.out_modulation(c).chunk(2, dim=-1)
        return self.head(modulate(self.norm_out(x), shift, scale))


def save_checkpoint(path, cfg, groups, meta=None):
    """Write a zip archive holding ``config.json``, ``index.json`` and raw tensors.

    ``groups`` maps a group name (``"model"``, ``"ema"``) to a state dict;
    tensors are stored as ``tensors/<group>/<param name>.bin`` in f32 LE.
    """
    index = {}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        zf.writestr("meta.json", json.dumps(meta or {}, indent=2, sort_keys=True))
        for group, state in groups.items():
            for name, tensor in state.items():
                key = f"{group}/{name}"
                arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
                member = f"tensors/{key}.bin"
                zf.writestr(zipfile.ZipInfo(member, date_time=(1980, 1, 1, 0, 0, 0)), arr.tobytes())
                index[key] = {"shape": list(arr.shape), "dtype": "<f4", "file": member}
        zf.writestr("index.json", json.dumps(index, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Return ``(config, {group: state_dict}, meta)``."""
    with zipfile.ZipFile(path) as zf:
        cfg = DiTConfig.from_dict(json.loads(zf.read("config.json")))
        meta = json.loads(zf.read("meta.json")) if "meta.json" in zf.namelist() else {}
        index = json.loads(zf.read("index.json"))
        groups = {}
        for key, entry in index.items():
            group, name = key.split("/", 1)
            arr = np.frombuffer(zf.read(entry["file"]), dtype=entry["dtype"]).reshape(entry["shape"])
            groups.setdefault(group, {})[name] = torch.from_numpy(arr.astype(np.float32))
    return cfg, groups, meta
