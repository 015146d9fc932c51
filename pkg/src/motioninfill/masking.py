"""Training-time span masks and inference-time edit timelines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .motion_core import EditSpec, TemporalMask, ValidationError

__all__ = [
    "MaskSamplerConfig",
    "EditTimeline",
    "sample_training_mask",
    "build_edit_timeline",
    "build_generation_timeline",
    "compose_timelines",
]


@dataclass(frozen=True)
class MaskSamplerConfig:
    min_ratio: float = 0.1
    max_ratio: float = 0.9
    n_spans: int = 1

    def __post_init__(self):
        if not 0 < self.min_ratio <= self.max_ratio <= 1:
            raise ValueError(f"need 0 < min_ratio <= max_ratio <= 1, got {self.min_ratio}, {self.max_ratio}")
        if self.n_spans < 1:
            raise ValueError("n_spans must be positive")


@dataclass(frozen=True, eq=False)
class EditTimeline:
    """Target-timeline layout of an edit.

    ``copy_map`` is an ``(K, 2)`` integer array of ``(source_frame, target_frame)``
    rows for original frames that survive unchanged; every other target frame
    is masked and must be synthesized.
    """

    new_total_frames: int
    mask: TemporalMask
    copy_map: np.ndarray

    def __post_init__(self):
        cm = np.asarray(self.copy_map, dtype=np.int64).reshape(-1, 2)
        cm.setflags(write=False)
        object.__setattr__(self, "copy_map", cm)
        if len(self.mask) != self.new_total_frames:
            raise ValueError("mask length must equal new_total_frames")

    def place(self, source, fill=0.0):
        """Lay ``source`` rows onto the target timeline; masked rows get ``fill``."""
        source = np.asarray(source)
        out = np.full((self.new_total_frames,) + source.shape[1:], fill, dtype=source.dtype)
        out[self.copy_map[:, 1]] = source[self.copy_map[:, 0]]
        return out

    def source_of(self):
        """Per-target-frame source index, ``-1`` for synthesized frames."""
        src = np.full(self.new_total_frames, -1, dtype=np.int64)
        src[self.copy_map[:, 1]] = self.copy_map[:, 0]
        return src

    def __eq__(self, other):
        if not isinstance(other, EditTimeline):
            return NotImplemented
        return (self.new_total_frames == other.new_total_frames and self.mask == other.mask
                and np.array_equal(self.copy_map, other.copy_map))


def _random_composition(total, parts, rng):
    """Split ``total`` into ``parts`` positive integers uniformly at random."""
    if parts == 1:
        return np.array([total])
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [total]]))


def sample_training_mask(T, cfg, rng):
    """Draw ``n_spans`` disjoint, non-adjacent masked spans covering a random ratio of T."""
    if T < 2:
        raise ValueError("training masks need T >= 2")
    lo = max(int(np.ceil(cfg.min_ratio * T - 1e-9)), cfg.n_spans)
    hi = int(np.floor(cfg.max_ratio * T + 1e-9))
    hi = min(hi, T - cfg.n_spans + 1)
    if hi < lo:
        raise ValueError(f"cannot place {cfg.n_spans} spans with ratio in "
                         f"[{cfg.min_ratio}, {cfg.max_ratio}] on {T} frames")
    ratio = rng.uniform(cfg.min_ratio, cfg.max_ratio)
    n_masked = int(np.clip(round(ratio * T), lo, hi))
    lengths = _random_composition(n_masked, cfg.n_spans, rng)
    # gaps: the n_spans - 1 inner gaps need at least one frame each
    free = T - n_masked - (cfg.n_spans - 1)
    gaps = rng.multinomial(free, np.full(cfg.n_spans + 1, 1.0 / (cfg.n_spans + 1)))
    gaps[1:-1] += 1
    flags = np.zeros(T, dtype=bool)
    pos = 0
    for gap, length in zip(gaps[:-1], lengths):
        pos += gap
        flags[pos:pos + length] = True
        pos += length
    return TemporalMask(flags)


def _timeline(new_total, mask_range, margin, segments):
    """Assemble a timeline from copied ``(src_start, src_end, dst_start)`` segments."""
    flags = np.zeros(new_total, dtype=bool)
    a, b = mask_range
    flags[max(0, a - margin):min(new_total, b + margin)] = True
    rows = [np.stack([np.arange(s0, s1), np.arange(d0, d0 + s1 - s0)], axis=1)
            for s0, s1, d0 in segments if s1 > s0]
    copy_map = np.concatenate(rows) if rows else np.zeros((0, 2), dtype=np.int64)
    copy_map = copy_map[~flags[copy_map[:, 1]]]
    return EditTimeline(new_total, TemporalMask(flags), copy_map)


def build_edit_timeline(T_orig, spec):
    """Target layout for a substitution, insertion or deletion.

    The synthesized region is the new span, widened by
    ``spec.context_margin_frames`` on each side. For deletions the new span
    is empty, so only the margin around the junction is synthesized.
    """
    if not isinstance(spec, EditSpec):
        raise TypeError("spec must be an EditSpec")
    spec.validate_against(T_orig)
    s, e, n = spec.orig_start_frame, spec.orig_end_frame, spec.new_span_frames
    new_total = T_orig - (e - s) + n
    if new_total < 1:
        raise ValidationError("edit removes every frame")
    segments = [(0, s, 0), (e, T_orig, s + n)]
    return _timeline(new_total, (s, s + n), spec.context_margin_frames, segments)


def build_generation_timeline(T_src, T_target):
    """Append ``T_target`` synthesized frames after ``T_src`` source frames."""
    if T_src < 0 or T_target < 1:
        raise ValueError("need T_src >= 0 and T_target >= 1")
    return _timeline(T_src + T_target, (T_src, T_src + T_target), 0, [(0, T_src, 0)])


def compose_timelines(first, second):
    """Timeline equivalent to applying ``first`` and then ``second``.

    ``second`` must be defined on ``first``'s target timeline. A target frame
    survives only if it is copied by both.
    """
    if second.copy_map[:, 0].max(initial=-1) >= first.new_total_frames:
        raise ValueError("second timeline reads beyond the first timeline's frames")
    src_of_mid = first.source_of()
    mid = second.copy_map[:, 0]
    keep = src_of_mid[mid] >= 0
    copy_map = np.stack([src_of_mid[mid[keep]], second.copy_map[keep, 1]], axis=1)
    flags = np.ones(second.new_total_frames, dtype=bool)
    flags[copy_map[:, 1]] = False
    return EditTimeline(second.new_total_frames, TemporalMask(flags), copy_map)
