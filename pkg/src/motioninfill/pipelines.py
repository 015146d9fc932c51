"""Training loop and the editing / generation entry points."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .cfm import LossWeights, cfm_loss, estimate_x1, total_loss, ts_loss
from .dit import MotionDiT, load_checkpoint, save_checkpoint
from .masking import (
    MaskSamplerConfig,
    build_edit_timeline,
    build_generation_timeline,
    sample_training_mask,
)
from .motion_core import (
    EditSpec,
    MotionSequence,
    ValidationError,
)
from .sampler import EmaState, SamplerConfig, ema_init, ema_update, euler_solve

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingError",
    "lr_at",
    "collate",
    "init_train_state",
    "train_step",
    "train",
    "velocity_fn",
    "edit_motion",
    "generate_motion",
    "ema_model",
    "save_train_state",
    "load_model",
]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 1e-4
    warmup_steps: int = 20_000
    total_steps: int = 1_000_000
    batch_size: int = 8
    ema_decay: float = 0.999
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mask_cfg: MaskSamplerConfig = field(default_factory=MaskSamplerConfig)
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    ts_composite: bool = True

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.lr_peak <= 0 or self.batch_size < 1:
            raise ValueError("lr_peak and batch_size must be positive")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")


def lr_at(step, cfg):
    """Linear warmup from 0 to ``lr_peak`` then linear decay to 0 at ``total_steps``."""
    step = min(max(step, 0), cfg.total_steps)
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    tail = cfg.total_steps - cfg.warmup_steps
    if tail == 0:
        return cfg.lr_peak
    return cfg.lr_peak * (cfg.total_steps - step) / tail


@dataclass
class TrainState:
    model: MotionDiT
    optimizer: torch.optim.Optimizer
    ema: EmaState
    step: int = 0


def init_train_state(dit_cfg, cfg, dtype=torch.float32):
    torch.manual_seed(cfg.seed)
    model = MotionDiT(dit_cfg).to(dtype)
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.ndim < 2 else decay).append(p)
    optimizer = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=lr_at(0, cfg), betas=cfg.betas)
    return TrainState(model, optimizer, ema_init(model.state_dict(), cfg.ema_decay))


def collate(pairs, dtype=torch.float32):
    """Pad ``(speech, motion)`` pairs to common lengths.

    Returns ``(motion, speech, frame_valid, speech_valid)`` tensors.
    """
    T = max(m.n_frames for _, m in pairs)
    N = max(s.n_frames for s, _ in pairs)
    D = pairs[0][0].dim
    B = len(pairs)
    motion = np.zeros((B, T, pairs[0][1].data.shape[1]), dtype=np.float32)
    speech = np.zeros((B, N, D), dtype=np.float32)
    fv = np.zeros((B, T), dtype=bool)
    sv = np.zeros((B, N), dtype=bool)
    for b, (s, m) in enumerate(pairs):
        if s.dim != D:
            raise ValidationError("speech feature widths differ within a batch")
        motion[b, :m.n_frames] = m.data
        speech[b, :s.n_frames] = s.feats
        fv[b, :m.n_frames] = True
        sv[b, :s.n_frames] = True
    return (torch.as_tensor(motion, dtype=dtype), torch.as_tensor(speech, dtype=dtype),
            torch.as_tensor(fv), torch.as_tensor(sv))


def compute_losses(model, x1, speech, frame_valid, speech_valid, t, x0, mask, weights, ts_composite=True):
    """Forward pass plus the masked velocity loss and the smoothness loss.

    With ``ts_composite`` the smoothness term sees the sequence the sampler
    would emit: predicted frames inside the mask, ground truth outside it.
    Otherwise it sees the raw prediction everywhere, whose context frames no
    other term supervises.
    """
    xt = (1 - t[:, None, None]) * x0 + t[:, None, None] * x1
    cond = x1 * (~mask)[..., None].to(x1.dtype)
    v = model(xt, cond, t, speech, frame_valid, speech_valid)
    l_cfm = cfm_loss(v, x0, x1, mask & frame_valid)
    x1_hat = estimate_x1(xt, v, t)
    if ts_composite:
        x1_hat = torch.where(mask[..., None], x1_hat, x1)
    l_ts = ts_loss(x1_hat, frame_valid)
    return total_loss(l_cfm, l_ts, weights), l_cfm, l_ts


def draw_training_inputs(x1, frame_valid, cfg, rng):
    """Per-item flow time, Gaussian source sample and span mask."""
    B, T, C = x1.shape
    t = torch.as_tensor(rng.uniform(0.0, 1.0, size=B), dtype=x1.dtype)
    x0 = torch.as_tensor(rng.standard_normal((B, T, C)), dtype=x1.dtype)
    mask = np.zeros((B, T), dtype=bool)
    for b, n in enumerate(frame_valid.sum(1).tolist()):
        mask[b, :n] = sample_training_mask(int(n), cfg.mask_cfg, rng).flags
    return t, x0, torch.as_tensor(mask)


def train_step(state, batch, cfg, rng):
    """One optimizer step on a list of ``(speech, motion)`` pairs.

    Returns a dict with ``loss``, ``cfm``, ``ts`` and ``lr``.
    """
    model = state.model
    dtype = next(model.parameters()).dtype
    x1, speech, fv, sv = collate(batch, dtype)
    t, x0, mask = draw_training_inputs(x1, fv, cfg, rng)
    lr = lr_at(state.step, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    model.train()
    loss, l_cfm, l_ts = compute_losses(model, x1, speech, fv, sv, t, x0, mask, cfg.loss_weights,
                                      cfg.ts_composite)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {state.step}: cfm={l_cfm.item()}, ts={l_ts.item()}, lr={lr}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.ema = ema_update(model.state_dict(), state.ema)
    state.step += 1
    return {"loss": loss.item(), "cfm": l_cfm.item(), "ts": l_ts.item(), "lr": lr}


def _buckets(pairs):
    by_len = {}
    for i, (_, m) in enumerate(pairs):
        by_len.setdefault(m.n_frames, []).append(i)
    return [np.array(v) for _, v in sorted(by_len.items())]


def train(pairs, dit_cfg, cfg, n_steps=None, callback=None, state=None):
    """Run ``n_steps`` (default ``cfg.total_steps``) steps on equal-length buckets of ``pairs``."""
    if not pairs:
        raise ValidationError("training needs at least one pair")
    rng = np.random.default_rng(cfg.seed)
    state = state or init_train_state(dit_cfg, cfg)
    buckets = _buckets(pairs)
    sizes = np.array([len(b) for b in buckets], dtype=float)
    history = []
    n_steps = cfg.total_steps - state.step if n_steps is None else n_steps
    for _ in range(n_steps):
        bucket = buckets[rng.choice(len(buckets), p=sizes / sizes.sum())]
        idx = rng.choice(bucket, size=cfg.batch_size, replace=len(bucket) < cfg.batch_size)
        losses = train_step(state, [pairs[i] for i in idx], cfg, rng)
        history.append(losses)
        if callback is not None:
            callback(state, losses)
        if state.step % 500 == 0:
            log.info("step %d loss %.4f (cfm %.4f ts %.4f) lr %.2e", state.step, losses["loss"],
                     losses["cfm"], losses["ts"], losses["lr"])
    return state, history


def ema_model(state):
    """Copy of the trained network carrying the EMA weights."""
    model = MotionDiT(state.model.cfg).to(next(state.model.parameters()).dtype)
    model.load_state_dict(state.ema.shadow)
    model.eval()
    return model


def velocity_fn(model):
    """Adapt a :class:`MotionDiT` to the sampler's ``(x, t, cond, speech)`` protocol."""
    model.eval()

    def fn(x, t, cond, speech):
        dtype = next(model.parameters()).dtype
        tt = torch.full((x.shape[0],), t, dtype=dtype)
        return model(x.to(dtype), cond.to(dtype), tt, speech.to(dtype)).to(x.dtype)

    return fn


def _check_speech_dim(model, speech):
    if speech.dim != model.cfg.speech_dim:
        raise ValidationError(f"speech width {speech.dim} does not match the model ({model.cfg.speech_dim})")


def edit_motion(orig, edited_speech, spec, model, scfg=SamplerConfig()):
    """Re-synthesize the edited span of ``orig`` for ``edited_speech``.

    Frames outside the synthesized region are copied bit-exactly; when the
    mask is empty (deletion without margin) the model is not called.
    """
    if not isinstance(spec, EditSpec):
        raise TypeError("spec must be an EditSpec")
    timeline = build_edit_timeline(orig.n_frames, spec)
    placed = timeline.place(orig.data)
    if timeline.mask.n_masked == 0:
        return MotionSequence(placed, orig.fps)
    _check_speech_dim(model, edited_speech)
    out = euler_solve(velocity_fn(model), placed, timeline.mask, edited_speech.feats, scfg)
    return MotionSequence(out, orig.fps)


def generate_motion(src_prefix, speech, T_target, model, scfg=SamplerConfig(), fps=25.0):
    """Synthesize ``T_target`` frames after ``src_prefix`` (``None`` for from-scratch)."""
    if T_target < 1:
        raise ValidationError("T_target must be >= 1")
    prefix = np.zeros((0, model.cfg.motion_width), dtype=np.float32) if src_prefix is None else src_prefix.data
    fps = fps if src_prefix is None else src_prefix.fps
    timeline = build_generation_timeline(prefix.shape[0], T_target)
    _check_speech_dim(model, speech)
    out = euler_solve(velocity_fn(model), timeline.place(prefix), timeline.mask, speech.feats, scfg)
    return MotionSequence(out, fps)


def save_train_state(state, path, train_cfg=None):
    """Checkpoint holding the raw weights (``model``) and the EMA shadow (``ema``)."""
    meta = {"step": state.step, "ema_decay": state.ema.decay}
    if train_cfg is not None:
        meta["train_config"] = asdict(train_cfg)
    save_checkpoint(path, state.model.cfg, {"model": state.model.state_dict(), "ema": state.ema.shadow}, meta)


def load_model(path, use_ema=True):
    """Inference network from a checkpoint, preferring EMA weights when present."""
    cfg, groups, _ = load_checkpoint(path)
    group = "ema" if use_ema and "ema" in groups else "model"
    model = MotionDiT(cfg)
    model.load_state_dict(groups[group])
    model.eval()
    return model
