"""Boundary-continuity and identity metrics for edited sequences.

A boundary sits at edited-timeline index ``k`` when frames ``k - 1`` and
``k`` straddle an edit: ``into-edit`` boundaries have the unedited frame at
``k - 1``, ``out-of-edit`` ones at ``k``. Each boundary records the original
index of its unedited frame so the metric can read a baseline from the
original video around the same spot.

Continuity metrics compare the change across the boundary pair with the
largest natural change among the original's neighbouring frame pairs
(``window`` pairs on the unedited side, including the original pair that
the boundary replaced) and clamp the excess at zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .motion_core import FrameSequence, MotionSequence, ValidationError
from .resample import dense_flow

__all__ = [
    "Boundary",
    "BoundarySet",
    "EvalReport",
    "boundaries_from_timeline",
    "photometric_continuity",
    "motion_continuity",
    "idsim",
    "motion_continuity_latent",
    "toy_identity_embedder",
    "evaluate_edit",
    "aggregate_reports",
]

DIRECTIONS = ("into-edit", "out-of-edit")


@dataclass(frozen=True)
class Boundary:
    index: int
    direction: str
    orig_index: int

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValidationError(f"unknown boundary direction {self.direction!r}")
        if self.index < 1:
            raise ValidationError("boundary index must be >= 1 (it pairs frames k-1 and k)")


@dataclass(frozen=True)
class BoundarySet:
    boundaries: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(sorted(self.boundaries, key=lambda b: (b.index, b.direction))))

    def __iter__(self):
        return iter(self.boundaries)

    def __len__(self):
        return len(self.boundaries)

    def check(self, n_edited, n_orig=None):
        for b in self.boundaries:
            if b.index >= n_edited:
                raise ValidationError(f"boundary {b.index} outside edited sequence of {n_edited} frames")
            if n_orig is not None and not 0 <= b.orig_index < n_orig:
                raise ValidationError(f"boundary original index {b.orig_index} outside {n_orig} frames")


def boundaries_from_timeline(timeline):
    """Seams of an edit timeline: wherever adjacent target frames are not consecutive copies."""
    src = timeline.source_of()
    found = []
    for k in range(1, len(src)):
        prev, cur = src[k - 1], src[k]
        if prev >= 0 and cur >= 0:
            if cur != prev + 1:
                found.append(Boundary(k, "into-edit", int(prev)))
        elif prev >= 0:
            found.append(Boundary(k, "into-edit", int(prev)))
        elif cur >= 0:
            found.append(Boundary(k, "out-of-edit", int(cur)))
    return BoundarySet(tuple(found))


def _baseline_pairs(b, n_orig, window):
    # pair j compares original frames j and j + 1
    if b.direction == "into-edit":
        lo, hi = b.orig_index - window + 1, b.orig_index
    else:
        lo, hi = b.orig_index - 1, b.orig_index + window - 2
    lo, hi = max(lo, 0), min(hi, n_orig - 2)
    return range(lo, hi + 1)


def _frames(seq):
    return seq.frames if isinstance(seq, FrameSequence) else FrameSequence(seq).frames


def _continuity(orig, edited, boundaries, window, pair_value):
    o, e = _frames(orig), _frames(edited)
    if len(boundaries) == 0:
        raise ValidationError("boundary set is empty")
    boundaries.check(len(e), len(o))
    per = []
    for b in boundaries:
        cross = pair_value(e[b.index - 1], e[b.index])
        base = max((pair_value(o[j], o[j + 1]) for j in _baseline_pairs(b, len(o), window)), default=0.0)
        per.append({"index": b.index, "direction": b.direction, "cross": cross, "base": base,
                    "excess": max(0.0, cross - base)})
    return float(np.mean([p["excess"] for p in per])), per


def photometric_continuity(orig, edited, boundaries, window=10, details=False):
    """Excess mean absolute pixel change across edit boundaries."""
    value, per = _continuity(orig, edited, boundaries, window,
                             lambda x, y: float(np.mean(np.abs(x.astype(np.float64) - y))))
    return (value, per) if details else value


def motion_continuity(orig, edited, boundaries, flow_fn=dense_flow, window=10, details=False):
    """Excess mean optical-flow magnitude (pixels) across edit boundaries."""
    cache = {}

    def flow_mag(x, y):
        key = (x.tobytes().__hash__(), y.tobytes().__hash__())
        if key not in cache:
            cache[key] = float(np.mean(flow_fn(x, y).magnitude()))
        return cache[key]

    value, per = _continuity(orig, edited, boundaries, window, flow_mag)
    return (value, per) if details else value


def toy_identity_embedder(frame, bins=8):
    """Deterministic stand-in identity feature.

    Per-channel intensity histograms plus a gradient-orientation histogram.
    Both are invariant to where the face sits in the frame, so the feature
    follows appearance rather than head motion.
    """
    f = np.asarray(frame, dtype=np.float64)
    n = f.shape[0] * f.shape[1]
    color = np.concatenate([np.histogram(f[..., c], bins=bins, range=(0.0, 1.0))[0] for c in range(3)]) / n
    gray = f @ np.array([0.299, 0.587, 0.114])
    gy, gx = np.gradient(gray)
    hist, _ = np.histogram(np.arctan2(gy, gx), bins=bins, range=(-np.pi, np.pi), weights=np.hypot(gx, gy))
    hist = hist / max(hist.sum(), 1e-12)
    return np.concatenate([color, hist])


def idsim(orig, gen, embedder=toy_identity_embedder):
    """Cosine similarity between the mean embeddings of two videos."""
    mean_o = np.mean([np.asarray(embedder(f), dtype=np.float64) for f in _frames(orig)], axis=0)
    mean_g = np.mean([np.asarray(embedder(f), dtype=np.float64) for f in _frames(gen)], axis=0)
    no, ng = np.linalg.norm(mean_o), np.linalg.norm(mean_g)
    if no == 0 or ng == 0:
        raise ValidationError("mean identity embedding has zero norm")
    return float(np.clip(mean_o @ mean_g / (no * ng), -1.0, 1.0))


def motion_continuity_latent(motion, boundaries, details=False):
    """Mean L1 jump of motion latents at the boundaries minus the median frame-to-frame L1 step."""
    data = motion.data if isinstance(motion, MotionSequence) else np.asarray(motion)
    if data.shape[0] < 2:
        raise ValidationError("need at least two frames")
    if len(boundaries) == 0:
        raise ValidationError("boundary set is empty")
    boundaries.check(data.shape[0])
    steps = np.abs(np.diff(data.astype(np.float64), axis=0)).sum(axis=1)
    jumps = [float(steps[b.index - 1]) for b in boundaries]
    value = max(0.0, float(np.mean(jumps)) - float(np.median(steps)))
    return (value, jumps) if details else value


@dataclass
class EvalReport:
    sample_id: str
    p_continuity: float
    m_continuity: float
    idsim: float
    motion_continuity_latent: float
    per_boundary: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def evaluate_edit(sample_id, orig_frames, edited_frames, edited_motion, boundaries,
                  embedder=toy_identity_embedder, flow_fn=dense_flow):
    p, p_per = photometric_continuity(orig_frames, edited_frames, boundaries, details=True)
    m, m_per = motion_continuity(orig_frames, edited_frames, boundaries, flow_fn=flow_fn, details=True)
    lat, jumps = motion_continuity_latent(edited_motion, boundaries, details=True)
    per = [{"index": pp["index"], "direction": pp["direction"], "p_cross": pp["cross"], "p_base": pp["base"],
            "m_cross": mm["cross"], "m_base": mm["base"], "latent_jump": j}
           for pp, mm, j in zip(p_per, m_per, jumps)]
    return EvalReport(sample_id, p, m, idsim(orig_frames, edited_frames, embedder), lat, per)


METRIC_NAMES = ("p_continuity", "m_continuity", "idsim", "motion_continuity_latent")


def aggregate_reports(reports):
    """``{metric: {"mean": ..., "std": ...}}`` over a list of reports."""
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = {"mean": float(vals.mean()) if vals.size else float("nan"),
                     "std": float(vals.std()) if vals.size else float("nan")}
    return out
