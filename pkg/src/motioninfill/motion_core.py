"""Motion / speech containers, validation helpers and the binary file formats.

Motion files (``.fmot``)::

    b"FMOT" | version u32 | T u32 | C u32 (=75) | fps f32 | T*C f32 row-major

Speech-feature files (``.sfea``)::

    b"SFEA" | version u32 | N u32 | D u32 | feature_rate f32 | N*D f32 row-major

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "MOTION_WIDTH",
    "DELTA_WIDTH",
    "ROT_WIDTH",
    "TRANS_WIDTH",
    "DEFAULT_MARGIN_FRAMES",
    "FormatError",
    "ValidationError",
    "MotionFrame",
    "MotionSequence",
    "SpeechFeatureSequence",
    "TemporalMask",
    "EditSpec",
    "FrameSequence",
    "check_motion_array",
    "check_speech_array",
    "component_views",
    "write_motion",
    "read_motion",
    "write_speech",
    "read_speech",
    "read_edit_spec",
    "write_edit_spec",
]

DELTA_WIDTH = 63
ROT_WIDTH = 9
TRANS_WIDTH = 3
MOTION_WIDTH = DELTA_WIDTH + ROT_WIDTH + TRANS_WIDTH

_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIf")
EDIT_KINDS = ("substitution", "insertion", "deletion")
# frames re-synthesized on each side of an edit: 200 ms at 25 fps
DEFAULT_MARGIN_FRAMES = 5


class ValidationError(ValueError):
    """Input violates a documented invariant."""


class FormatError(ValidationError):
    """A file is not in the expected binary layout."""


def check_motion_array(data, name="motion"):
    """Return ``data`` as a float32 ``(T, 75)`` array, raising on bad input."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] != MOTION_WIDTH:
        raise ValidationError(f"{name} must have shape (T, {MOTION_WIDTH}), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValidationError(f"{name} must contain at least one frame")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_speech_array(data, name="speech"):
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must have shape (N>=1, D>=1), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _check_rate(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValidationError(f"{name} must be positive, got {value}")
    return value


def _readonly(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MotionFrame:
    delta: np.ndarray
    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        for name, width in (("delta", DELTA_WIDTH), ("rot", ROT_WIDTH), ("trans", TRANS_WIDTH)):
            arr = np.asarray(getattr(self, name), dtype=np.float32).reshape(-1)
            if arr.shape != (width,):
                raise ValidationError(f"{name} must hold {width} values, got {arr.size}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
            object.__setattr__(self, name, _readonly(arr))

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        if vec.shape != (MOTION_WIDTH,):
            raise ValidationError(f"motion frame must hold {MOTION_WIDTH} values, got {vec.size}")
        return cls(vec[:DELTA_WIDTH], vec[DELTA_WIDTH:DELTA_WIDTH + ROT_WIDTH], vec[-TRANS_WIDTH:])

    def to_vector(self):
        return np.concatenate([self.delta, self.rot, self.trans])


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """``T x 75`` facial-motion latents sampled at ``fps``.

    Each row is ``[delta (21x3), rot (3x3), trans (1x3)]`` flattened.
    """

    data: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        object.__setattr__(self, "data", _readonly(check_motion_array(self.data)))
        object.__setattr__(self, "fps", _check_rate(self.fps, "fps"))

    @classmethod
    def from_frames(cls, frames, fps=25.0):
        frames = list(frames)
        if not frames:
            raise ValidationError("motion must contain at least one frame")
        return cls(np.stack([f.to_vector() for f in frames]), fps)

    @property
    def n_frames(self):
        return self.data.shape[0]

    def __len__(self):
        return self.n_frames

    @property
    def frames(self):
        return [MotionFrame.from_vector(row) for row in self.data]

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class SpeechFeatureSequence:
    feats: np.ndarray
    feature_rate_hz: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "feats", _readonly(check_speech_array(self.feats)))
        object.__setattr__(self, "feature_rate_hz", _check_rate(self.feature_rate_hz, "feature_rate_hz"))

    @property
    def n_frames(self):
        return self.feats.shape[0]

    @property
    def dim(self):
        return self.feats.shape[1]

    @property
    def duration(self):
        return self.n_frames / self.feature_rate_hz

    def __len__(self):
        return self.n_frames

    def __eq__(self, other):
        if not isinstance(other, SpeechFeatureSequence):
            return NotImplemented
        return self.feature_rate_hz == other.feature_rate_hz and np.array_equal(self.feats, other.feats)


@dataclass(frozen=True, eq=False)
class TemporalMask:
    """Per-frame mask; ``True`` marks frames to synthesize."""

    flags: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags)
        if flags.ndim != 1:
            raise ValidationError(f"mask must be one-dimensional, got shape {flags.shape}")
        object.__setattr__(self, "flags", _readonly(flags.astype(bool)))

    def __len__(self):
        return self.flags.shape[0]

    @property
    def n_masked(self):
        return int(self.flags.sum())

    def broadcast(self, width=MOTION_WIDTH):
        """Channel-uniform ``(T, width)`` float mask (1.0 = masked)."""
        return np.repeat(self.flags[:, None], width, axis=1).astype(np.float32)

    def spans(self):
        """Half-open ``(start, end)`` runs of masked frames."""
        padded = np.concatenate([[False], self.flags, [False]]).astype(np.int8)
        edges = np.flatnonzero(np.diff(padded))
        return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]

    def __eq__(self, other):
        if not isinstance(other, TemporalMask):
            return NotImplemented
        return np.array_equal(self.flags, other.flags)


@dataclass(frozen=True)
class EditSpec:
    kind: str
    orig_start_frame: int
    orig_end_frame: int
    new_span_frames: int = 0
    context_margin_frames: int = DEFAULT_MARGIN_FRAMES

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise ValidationError(f"unknown edit kind {self.kind!r}; expected one of {EDIT_KINDS}")
        for name in ("orig_start_frame", "orig_end_frame", "new_span_frames", "context_margin_frames"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value:
                raise ValidationError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.orig_start_frame < 0 or self.orig_end_frame < self.orig_start_frame:
            raise ValidationError(
                f"invalid span [{self.orig_start_frame}, {self.orig_end_frame})")
        if self.new_span_frames < 0:
            raise ValidationError("new_span_frames must be non-negative")
        if self.context_margin_frames < 0:
            raise ValidationError("context_margin_frames must be non-negative")
        if self.kind == "insertion" and self.orig_start_frame != self.orig_end_frame:
            raise ValidationError("insertion requires orig_start_frame == orig_end_frame")
        if self.kind == "deletion" and self.new_span_frames != 0:
            raise ValidationError("deletion requires new_span_frames == 0")

    @classmethod
    def from_seconds(cls, kind, start_s, end_s, new_duration_s, fps, margin_frames=DEFAULT_MARGIN_FRAMES):
        """Build a spec from timestamps using ``frame = round(seconds * fps)``."""
        return cls(kind, int(round(start_s * fps)), int(round(end_s * fps)),
                   int(round(new_duration_s * fps)), margin_frames)

    def validate_against(self, n_frames):
        if self.orig_end_frame > n_frames:
            raise ValidationError(
                f"edit span [{self.orig_start_frame}, {self.orig_end_frame}) exceeds {n_frames} frames")

    def to_dict(self):
        return {
            "kind": self.kind,
            "orig_start_frame": self.orig_start_frame,
            "orig_end_frame": self.orig_end_frame,
            "new_span_frames": self.new_span_frames,
            "context_margin_frames": self.context_margin_frames,
        }

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ValidationError("edit spec must be a JSON object")
        unknown = set(obj) - {"kind", "orig_start_frame", "orig_end_frame",
                              "new_span_frames", "context_margin_frames"}
        if unknown:
            raise ValidationError(f"unknown edit spec fields: {sorted(unknown)}")
        try:
            return cls(obj["kind"], obj["orig_start_frame"], obj["orig_end_frame"],
                       obj.get("new_span_frames", 0), obj.get("context_margin_frames", DEFAULT_MARGIN_FRAMES))
        except KeyError as exc:
            raise ValidationError(f"edit spec missing field {exc.args[0]!r}") from None


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """``T x H x W x 3`` images with values in ``[0, 1]``."""

    frames: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.dtype == np.uint8:
            frames = frames.astype(np.float32) / 255.0
        frames = frames.astype(np.float32, copy=False)
        if frames.ndim != 4 or frames.shape[-1] != 3 or frames.shape[0] < 1:
            raise ValidationError(f"frames must have shape (T, H, W, 3), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("frames contain non-finite values")
        object.__setattr__(self, "frames", _readonly(frames))
        object.__setattr__(self, "fps", _check_rate(self.fps, "fps"))

    def __len__(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[1:3]


def component_views(seq):
    """Split motion into ``(delta, rot, trans)`` views of widths 63, 9, 3."""
    data = seq.data if isinstance(seq, MotionSequence) else check_motion_array(seq)
    return (data[:, :DELTA_WIDTH],
            data[:, DELTA_WIDTH:DELTA_WIDTH + ROT_WIDTH],
            data[:, DELTA_WIDTH + ROT_WIDTH:])


def _write_table(path, magic, rows, rate):
    rows = np.ascontiguousarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, _FORMAT_VERSION, rows.shape[0], rows.shape[1], rate))
        fh.write(rows.tobytes())


def _read_table(path, magic):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    got_magic, version, n, c, rate = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != _FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != n * c * 4:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, expected {n * c * 4}")
    rows = np.frombuffer(payload, dtype="<f4").reshape(n, c).astype(np.float32)
    return rows, rate


def write_motion(seq, path):
    _write_table(path, b"FMOT", seq.data, seq.fps)


def read_motion(path):
    rows, fps = _read_table(path, b"FMOT")
    return MotionSequence(rows, fps)


def write_speech(seq, path):
    _write_table(path, b"SFEA", seq.feats, seq.feature_rate_hz)


def read_speech(path):
    rows, rate = _read_table(path, b"SFEA")
    return SpeechFeatureSequence(rows, rate)


def read_edit_spec(path):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    return EditSpec.from_dict(obj)


def write_edit_spec(spec, path):
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
