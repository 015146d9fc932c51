"""Synthetic speech-to-motion oracle task and benchmark manifests.

The synthetic task stands in for paired video/speech data:

* speech ``A`` (N x D) is white noise smoothed in time with a Gaussian kernel;
* motion ``F`` (T x 75) is ``smooth(resample_time(A) @ W) + P`` where ``W`` is
  a fixed sparse projection derived from ``projection_seed`` and ``P`` adds
  slow sinusoids to the rotation and translation channels.

``W`` and the pose frequencies are shared by every sample with the same
``projection_seed``; the speech noise and the pose phases come from ``seed``.
The map is deterministic, so the ground truth for any masked region is
always available.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .motion_core import (
    DEFAULT_MARGIN_FRAMES,
    DELTA_WIDTH,
    EDIT_KINDS,
    MOTION_WIDTH,
    EditSpec,
    MotionSequence,
    SpeechFeatureSequence,
    ValidationError,
)

__all__ = [
    "SynthConfig",
    "synth_pair",
    "synth_speech",
    "oracle_motion",
    "projection_matrix",
    "SPAN_CLASSES",
    "FRAMES_PER_WORD",
    "span_class_for_words",
    "ManifestSample",
    "BenchManifest",
    "manifest_stats",
    "make_synthetic_manifest",
]

SPAN_CLASSES = {"short": (1, 3), "medium": (4, 6), "long": (7, 10)}
# 0.4 s per word at 25 fps; only used to label synthetic samples
FRAMES_PER_WORD = 10


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    T: int = 64
    D: int = 32
    fps: float = 25.0
    feature_rate_hz: float = 50.0
    smoothness_sigma: float = 2.0  # motion frames
    projection_seed: int = 0
    projection_density: float = 0.25
    motion_sigma: float = 1.0
    pose_amplitude: float = 0.5
    pose_freq_hz: tuple = (0.1, 0.3)

    def __post_init__(self):
        if self.T < 1 or self.D < 1:
            raise ValidationError("T and D must be positive")
        if self.fps <= 0 or self.feature_rate_hz <= 0 or self.smoothness_sigma <= 0:
            raise ValidationError("rates and smoothness must be positive")
        if not 0 < self.projection_density <= 1:
            raise ValidationError("projection_density must lie in (0, 1]")

    @property
    def n_speech_frames(self):
        return max(1, int(round(self.T * self.feature_rate_hz / self.fps)))

    def to_dict(self):
        d = asdict(self)
        d["pose_freq_hz"] = list(self.pose_freq_hz)
        return d

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        if "pose_freq_hz" in obj:
            obj["pose_freq_hz"] = tuple(obj["pose_freq_hz"])
        return cls(**obj)


def projection_matrix(cfg):
    """Sparse ``D x 75`` map; every motion channel reads at least one speech channel."""
    rng = np.random.default_rng([cfg.projection_seed, 1])
    support = rng.random((cfg.D, MOTION_WIDTH)) < cfg.projection_density
    support[rng.integers(cfg.D, size=MOTION_WIDTH), np.arange(MOTION_WIDTH)] = True
    weights = rng.standard_normal((cfg.D, MOTION_WIDTH)) * support
    # unit variance per motion channel for unit-variance speech
    weights /= np.sqrt((weights ** 2).sum(axis=0, keepdims=True))
    return weights


def _pose_frequencies(cfg):
    rng = np.random.default_rng([cfg.projection_seed, 2])
    lo, hi = cfg.pose_freq_hz
    return rng.uniform(lo, hi, size=MOTION_WIDTH - DELTA_WIDTH)


def _pose_component(cfg, n_frames):
    phases = np.random.default_rng([cfg.seed, 3]).uniform(0, 2 * np.pi, size=MOTION_WIDTH - DELTA_WIDTH)
    time = np.arange(n_frames)[:, None] / cfg.fps
    pose = np.zeros((n_frames, MOTION_WIDTH))
    pose[:, DELTA_WIDTH:] = cfg.pose_amplitude * np.sin(2 * np.pi * _pose_frequencies(cfg) * time + phases)
    return pose


def synth_speech(cfg, n_frames=None):
    """Unit-variance temporally smooth Gaussian features, ``(N, D)``."""
    n = cfg.n_speech_frames if n_frames is None else n_frames
    sigma = cfg.smoothness_sigma * cfg.feature_rate_hz / cfg.fps
    pad = int(np.ceil(4 * sigma))
    rng = np.random.default_rng([cfg.seed, 0])
    noise = rng.standard_normal((n + 2 * pad, cfg.D))
    smooth = gaussian_filter1d(noise, sigma, axis=0, mode="wrap")[pad:pad + n]
    # variance of Gaussian-filtered unit white noise is sum(kernel^2) ~ 1 / (2 sqrt(pi) sigma)
    kernel = np.exp(-0.5 * (np.arange(-pad, pad + 1) / sigma) ** 2)
    kernel /= kernel.sum()
    return smooth / np.sqrt((kernel ** 2).sum())


def _resample_time(feats, n_frames, fps, rate):
    idx = np.arange(n_frames) * rate / fps
    src = np.arange(feats.shape[0])
    return np.stack([np.interp(idx, src, feats[:, d]) for d in range(feats.shape[1])], axis=1)


def oracle_motion(speech_feats, cfg, n_frames=None):
    """Deterministic motion for ``speech_feats`` under ``cfg``'s projection and pose."""
    speech_feats = np.asarray(speech_feats, dtype=np.float64)
    if speech_feats.shape[1] != cfg.D:
        raise ValidationError(f"speech width {speech_feats.shape[1]} != D={cfg.D}")
    if n_frames is None:
        n_frames = max(1, int(round(speech_feats.shape[0] * cfg.fps / cfg.feature_rate_hz)))
    aligned = _resample_time(speech_feats, n_frames, cfg.fps, cfg.feature_rate_hz)
    driven = gaussian_filter1d(aligned @ projection_matrix(cfg), cfg.motion_sigma, axis=0, mode="nearest")
    return driven + _pose_component(cfg, n_frames)


def synth_pair(cfg):
    """Return ``(speech, motion)`` for one synthetic utterance."""
    feats = synth_speech(cfg)
    motion = oracle_motion(feats, cfg, cfg.T)
    return (SpeechFeatureSequence(feats, cfg.feature_rate_hz), MotionSequence(motion, cfg.fps))


def span_class_for_words(n_words):
    for name, (lo, hi) in SPAN_CLASSES.items():
        if lo <= n_words <= hi:
            return name
    raise ValidationError(f"{n_words} words falls outside every span class")


@dataclass(frozen=True)
class ManifestSample:
    id: str
    motion_path: str
    speech_path: str
    edited_speech_path: str
    edit: EditSpec
    edit_kind: str
    span_class: str
    n_words: int | None = None

    def __post_init__(self):
        if self.edit_kind not in EDIT_KINDS:
            raise ValidationError(f"unknown edit kind {self.edit_kind!r}")
        if self.span_class not in SPAN_CLASSES:
            raise ValidationError(f"unknown span class {self.span_class!r}")
        if self.edit.kind != self.edit_kind:
            raise ValidationError(f"sample {self.id}: edit_kind {self.edit_kind!r} != edit.kind {self.edit.kind!r}")
        if self.n_words is not None and span_class_for_words(self.n_words) != self.span_class:
            raise ValidationError(f"sample {self.id}: {self.n_words} words is not {self.span_class!r}")

    def to_dict(self):
        d = {"id": self.id, "motion_path": self.motion_path, "speech_path": self.speech_path,
             "edited_speech_path": self.edited_speech_path, "edit": self.edit.to_dict(),
             "edit_kind": self.edit_kind, "span_class": self.span_class}
        if self.n_words is not None:
            d["n_words"] = self.n_words
        return d

    @classmethod
    def from_dict(cls, obj):
        try:
            return cls(str(obj["id"]), obj["motion_path"], obj["speech_path"], obj["edited_speech_path"],
                       EditSpec.from_dict(obj["edit"]), obj["edit_kind"], obj["span_class"],
                       obj.get("n_words"))
        except KeyError as exc:
            raise ValidationError(f"manifest sample missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class BenchManifest:
    samples: tuple = ()
    root: Path | None = None

    def resolve(self, rel):
        path = Path(rel)
        return path if path.is_absolute() or self.root is None else self.root / path

    def check_paths(self):
        for s in self.samples:
            for rel in (s.motion_path, s.speech_path, s.edited_speech_path):
                if not self.resolve(rel).exists():
                    raise ValidationError(f"sample {s.id}: missing file {rel}")

    def to_json(self):
        return json.dumps({"samples": [s.to_dict() for s in self.samples]}, indent=2) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("samples"), list):
            raise ValidationError(f"{path}: manifest must be an object with a 'samples' list")
        return cls(tuple(ManifestSample.from_dict(s) for s in obj["samples"]), path.parent)


def manifest_stats(manifest):
    """Counts per ``(span_class, edit_kind)`` with row and column totals.

    Returns a dict ``{span_class: {kind: count, ..., "total": n}, "total": {...}}``.
    """
    samples = manifest.samples if isinstance(manifest, BenchManifest) else manifest
    counts = Counter()
    for s in samples:
        if s.edit_kind not in EDIT_KINDS or s.span_class not in SPAN_CLASSES:
            raise ValidationError(f"sample {s.id}: unknown kind/class {s.edit_kind!r}/{s.span_class!r}")
        counts[s.span_class, s.edit_kind] += 1
    table = {}
    for cls_name in SPAN_CLASSES:
        row = {kind: counts[cls_name, kind] for kind in EDIT_KINDS}
        row["total"] = sum(row.values())
        table[cls_name] = row
    totals = {kind: sum(table[c][kind] for c in SPAN_CLASSES) for kind in EDIT_KINDS}
    totals["total"] = sum(totals.values())
    table["total"] = totals
    return table


def _splice_speech(base_cfg, feats, spec, rng):
    """Edited-utterance features: original features with the span swapped for fresh ones."""
    ratio = base_cfg.feature_rate_hz / base_cfg.fps
    s = int(round(spec.orig_start_frame * ratio))
    e = int(round(spec.orig_end_frame * ratio))
    n_new = int(round(spec.new_span_frames * ratio))
    fresh_cfg = replace(base_cfg, seed=int(rng.integers(2 ** 31)))
    fresh = synth_speech(fresh_cfg, max(n_new, 1))[:n_new]
    return np.concatenate([feats[:s], fresh, feats[e:]], axis=0)


def make_synthetic_manifest(out_dir, base_cfg, count, margin=DEFAULT_MARGIN_FRAMES):
    """Write ``count`` synthetic pairs plus edited speech and a manifest into ``out_dir``.

    Sample ``i`` uses seed ``base_cfg.seed * 100003 + i``. Deletion spans must
    fit inside the clip, so long deletions only appear when ``T`` allows them.
    """
    from .motion_core import write_motion, write_speech

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([base_cfg.seed, 17])
    samples = []
    T = base_cfg.T
    max_words = (T - 2) // FRAMES_PER_WORD
    for i in range(count):
        cfg = replace(base_cfg, seed=base_cfg.seed * 100003 + i)
        speech, motion = synth_pair(cfg)
        kind = EDIT_KINDS[int(rng.integers(len(EDIT_KINDS)))]
        classes = [c for c, (lo, _) in SPAN_CLASSES.items() if kind != "deletion" or lo <= max_words]
        if not classes:
            kind, classes = "insertion", list(SPAN_CLASSES)
        span_class = classes[int(rng.integers(len(classes)))]
        lo, hi = SPAN_CLASSES[span_class]
        if kind == "deletion":
            hi = min(hi, max_words)
        n_words = int(rng.integers(lo, hi + 1))
        span = n_words * FRAMES_PER_WORD
        if kind == "insertion":
            start = int(rng.integers(1, T))
            spec = EditSpec(kind, start, start, span, margin)
        elif kind == "deletion":
            start = int(rng.integers(1, T - span))
            spec = EditSpec(kind, start, start + span, 0, margin)
        else:
            old_words = int(rng.integers(1, max(1, min(hi, max_words)) + 1))
            old = min(old_words * FRAMES_PER_WORD, T - 2)
            start = int(rng.integers(1, T - old))
            spec = EditSpec(kind, start, start + old, span, margin)
        edited = _splice_speech(cfg, speech.feats, spec, rng)
        sid = f"{i:04d}"
        paths = {"motion_path": f"motion_{sid}.fmot", "speech_path": f"speech_{sid}.sfea",
                 "edited_speech_path": f"edited_speech_{sid}.sfea"}
        write_motion(motion, out_dir / paths["motion_path"])
        write_speech(speech, out_dir / paths["speech_path"])
        write_speech(SpeechFeatureSequence(edited, cfg.feature_rate_hz), out_dir / paths["edited_speech_path"])
        samples.append(ManifestSample(sid, edit=spec, edit_kind=kind, span_class=span_class,
                                      n_words=n_words, **paths))
    manifest = BenchManifest(tuple(samples), out_dir)
    manifest.save(out_dir / "manifest.json")
    (out_dir / "synth_config.json").write_text(json.dumps(base_cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest
