"""scikit-learn style estimator wrapping training, editing and generation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cfm import LossWeights
from .dit import DiTConfig
from .masking import MaskSamplerConfig
from .motion_core import EditSpec, MotionSequence, SpeechFeatureSequence, ValidationError
from .pipelines import (
    TrainConfig,
    edit_motion,
    ema_model,
    generate_motion,
    init_train_state,
    load_model,
    save_train_state,
    train,
)
from .sampler import SamplerConfig

__all__ = ["MotionInfiller", "check_pairs"]


def _as_speech(x, rate):
    if isinstance(x, SpeechFeatureSequence):
        return x
    return SpeechFeatureSequence(np.asarray(x), rate)


def _as_motion(y, fps):
    if isinstance(y, MotionSequence):
        return y
    return MotionSequence(np.asarray(y), fps)


def check_pairs(X, y, feature_rate_hz=50.0, fps=25.0):
    """Validate parallel lists of speech features and motion sequences.

    Plain arrays are accepted and wrapped with the given rates.
    """
    if y is None:
        raise ValidationError("fit needs target motion sequences")
    X = [_as_speech(x, feature_rate_hz) for x in X]
    y = [_as_motion(m, fps) for m in y]
    if len(X) != len(y) or not X:
        raise ValidationError(f"need equally many speech and motion sequences, got {len(X)} and {len(y)}")
    dims = {s.dim for s in X}
    if len(dims) != 1:
        raise ValidationError(f"speech feature widths differ: {sorted(dims)}")
    for s, m in zip(X, y):
        if m.n_frames < 2:
            raise ValidationError("training sequences need at least two frames")
    return X, y


class MotionInfiller(BaseEstimator):
    """Speech-conditioned motion infilling model.

    ``fit(X, y)`` trains on speech features ``X`` and motion sequences ``y``.
    ``predict(X)`` generates motion from scratch for each utterance, while
    :meth:`edit` and :meth:`generate` expose the masked-infilling entry points.
    Inference uses the EMA weights.
    """

    def __init__(self, n_layers=4, n_heads=4, d_model=128, d_ffn=256, self_window=8,
                 cross_window=8, rope_scale=1.0, lr_peak=1e-3, warmup_steps=200, total_steps=4000,
                 batch_size=16, ema_decay=0.999, lambda_ts=0.2, min_mask_ratio=0.1,
                 max_mask_ratio=0.9, n_steps=32, sway_s=-1.0, random_state=0):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_ffn = d_ffn
        self.self_window = self_window
        self.cross_window = cross_window
        self.rope_scale = rope_scale
        self.lr_peak = lr_peak
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.ema_decay = ema_decay
        self.lambda_ts = lambda_ts
        self.min_mask_ratio = min_mask_ratio
        self.max_mask_ratio = max_mask_ratio
        self.n_steps = n_steps
        self.sway_s = sway_s
        self.random_state = random_state

    def _dit_config(self, speech_dim):
        return DiTConfig(n_layers=self.n_layers, n_heads=self.n_heads, d_model=self.d_model,
                         d_ffn=self.d_ffn, self_window=self.self_window, cross_window=self.cross_window,
                         rope_scale=self.rope_scale, speech_dim=speech_dim)

    def _train_config(self):
        return TrainConfig(lr_peak=self.lr_peak, warmup_steps=self.warmup_steps,
                           total_steps=self.total_steps, batch_size=self.batch_size,
                           ema_decay=self.ema_decay, loss_weights=LossWeights(self.lambda_ts),
                           mask_cfg=MaskSamplerConfig(self.min_mask_ratio, self.max_mask_ratio),
                           seed=self.random_state)

    def _sampler_config(self, seed=None):
        return SamplerConfig(self.n_steps, self.sway_s, self.random_state if seed is None else seed)

    def fit(self, X, y, callback=None):
        X, y = check_pairs(X, y)
        self.config_ = self._dit_config(X[0].dim)
        self.train_config_ = self._train_config()
        self.state_ = init_train_state(self.config_, self.train_config_)
        self.state_, self.history_ = train(list(zip(X, y)), self.config_, self.train_config_,
                                           callback=callback, state=self.state_)
        self.model_ = ema_model(self.state_)
        self.n_features_in_ = X[0].dim
        return self

    def _check_speech(self, speech):
        check_is_fitted(self, "model_")
        speech = _as_speech(speech, 50.0)
        if speech.dim != self.n_features_in_:
            raise ValidationError(f"speech width {speech.dim} != fitted width {self.n_features_in_}")
        return speech

    def edit(self, motion, edited_speech, spec, seed=None):
        """Re-synthesize the edited span of ``motion`` for ``edited_speech``."""
        speech = self._check_speech(edited_speech)
        if isinstance(spec, dict):
            spec = EditSpec.from_dict(spec)
        return edit_motion(_as_motion(motion, 25.0), speech, spec, self.model_, self._sampler_config(seed))

    def generate(self, speech, prefix=None, n_frames=None, fps=25.0, seed=None):
        """Motion for ``speech`` after ``prefix``; length defaults to the speech duration."""
        speech = self._check_speech(speech)
        prefix = None if prefix is None else _as_motion(prefix, fps)
        fps = prefix.fps if prefix is not None else fps
        if n_frames is None:
            n_frames = int(round(speech.duration * fps)) - (0 if prefix is None else prefix.n_frames)
        return generate_motion(prefix, speech, n_frames, self.model_, self._sampler_config(seed), fps)

    def predict(self, X, fps=25.0):
        """From-scratch motion for each utterance in ``X``."""
        return [self.generate(x, fps=fps, seed=None if self.random_state is None else self.random_state + i)
                for i, x in enumerate(X)]

    def save(self, path):
        check_is_fitted(self, "state_")
        save_train_state(self.state_, path, self.train_config_)

    @classmethod
    def from_checkpoint(cls, path, **params):
        est = cls(**params)
        est.model_ = load_model(path)
        est.config_ = est.model_.cfg
        est.n_features_in_ = est.config_.speech_dim
        return est
