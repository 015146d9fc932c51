"""Frame resampling for edited segments whose duration changed.

Flow is estimated with a coarse-to-fine iterative Lucas-Kanade solver.
Interpolated frames are produced by splatting both neighbours along the
alpha-scaled flow, with the facial region and the background carried on
separate layers (the face layer occludes the background) and holes filled by
blending the unwarped neighbours.

Video container (``.fvid``)::

    b"FVID" | H u32 | W u32 | T u32 | fps f32 | T*H*W*3 u8 (RGB, row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .motion_core import FormatError, FrameSequence, ValidationError

__all__ = [
    "FlowField",
    "RegionMask",
    "default_face_region",
    "dense_flow",
    "interpolate_frames",
    "resample_sequence",
    "source_positions",
    "psnr",
    "write_video",
    "read_video",
    "write_frame_dir",
    "read_frame_dir",
]

_FVID = struct.Struct("<4sIIIf")


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement such that ``a[y, x] ~ b[y + v, x + u]``."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.shape != v.shape or u.ndim != 2:
            raise ValidationError("flow components must be matching 2-D arrays")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValidationError("flow contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def shape(self):
        return self.u.shape

    def magnitude(self):
        return np.hypot(self.u, self.v)

    def scaled(self, factor):
        return FlowField(self.u * factor, self.v * factor)


@dataclass(frozen=True, eq=False)
class RegionMask:
    face: np.ndarray

    def __post_init__(self):
        face = np.asarray(self.face, dtype=bool)
        if face.ndim != 2:
            raise ValidationError("region mask must be 2-D")
        object.__setattr__(self, "face", face)


def default_face_region(height, width, rx=0.3, ry=0.4):
    """Centered ellipse with semi-axes ``rx * width`` and ``ry * height``."""
    y, x = np.mgrid[0:height, 0:width]
    cy, cx = (height - 1) / 2, (width - 1) / 2
    return RegionMask(((x - cx) / (rx * width)) ** 2 + ((y - cy) / (ry * height)) ** 2 <= 1.0)


def _gray(frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        frame = frame @ np.array([0.299, 0.587, 0.114])
    return frame


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        blurred = ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")
        pyr.append(blurred[::2, ::2])
    return pyr[::-1]


def _warp(img, u, v):
    h, w = img.shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(img, [y + v, x + u], order=1, mode="nearest")


def _upsample_flow(u, v, shape):
    zy, zx = shape[0] / u.shape[0], shape[1] / u.shape[1]
    up = [ndimage.zoom(c, (zy, zx), order=1, mode="nearest", grid_mode=True) for c in (u, v)]
    out = []
    for c, scale in zip(up, (zx, zy)):
        fixed = np.zeros(shape)
        fixed[:c.shape[0], :c.shape[1]] = c[:shape[0], :shape[1]]
        out.append(fixed * scale)
    return out


def dense_flow(a, b, levels=3, iterations=5, window_sigma=4.0, reg=1e-3, max_step=1.0):
    """Estimate the flow from frame ``a`` to frame ``b`` (pixels).

    Each warping iteration solves the windowed Lucas-Kanade normal equations.
    Samples that land outside ``b`` get zero weight, updates are clamped to
    ``max_step`` pixels (at the current pyramid level) and the system is
    regularized by ``reg`` times the mean gradient energy so that textureless
    windows keep the estimate inherited from the coarser level.
    """
    ga, gb = _gray(a), _gray(b)
    if ga.shape != gb.shape:
        raise ValidationError(f"frame shapes differ: {ga.shape} vs {gb.shape}")
    levels = max(1, min(levels, int(np.log2(min(ga.shape))) - 2))
    pa, pb = _pyramid(ga, levels), _pyramid(gb, levels)
    u = np.zeros(pa[0].shape)
    v = np.zeros(pa[0].shape)

    def window(z):
        return ndimage.gaussian_filter(z, window_sigma, mode="nearest")

    for la, lb in zip(pa, pb):
        if u.shape != la.shape:
            u, v = _upsample_flow(u, v, la.shape)
        h, w = la.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        gy_a, gx_a = np.gradient(la)
        for _ in range(iterations):
            wb = _warp(lb, u, v)
            gy_b, gx_b = np.gradient(wb)
            inside = ((xx + u >= 0) & (xx + u <= w - 1) & (yy + v >= 0) & (yy + v <= h - 1)).astype(np.float64)
            ix, iy = 0.5 * (gx_a + gx_b), 0.5 * (gy_a + gy_b)
            it = wb - la
            sxx, syy, sxy = window(inside * ix * ix), window(inside * iy * iy), window(inside * ix * iy)
            sxt, syt = window(inside * ix * it), window(inside * iy * it)
            lam = reg * max(float(np.mean(sxx + syy)), 1e-12)
            sxx, syy = sxx + lam, syy + lam
            det = sxx * syy - sxy * sxy
            du = np.clip(-(syy * sxt - sxy * syt) / det, -max_step, max_step)
            dv = np.clip(-(sxx * syt - sxy * sxt) / det, -max_step, max_step)
            u = ndimage.median_filter(u + du, size=3, mode="nearest")
            v = ndimage.median_filter(v + dv, size=3, mode="nearest")
    return FlowField(u, v)


def _region_flow(flow, region, sigma=2.0):
    """Flow inside ``region`` extended by normalized convolution (region pixels only)."""
    w = region.astype(np.float64)
    denom = ndimage.gaussian_filter(w, sigma, mode="nearest")
    out = []
    for c in (flow.u, flow.v):
        num = ndimage.gaussian_filter(c * w, sigma, mode="nearest")
        fallback = np.where(region, c, 0.0)
        out.append(np.where(denom > 1e-6, num / np.maximum(denom, 1e-12), fallback))
    return FlowField(*out)


def _splat(img, weight, u, v, select, acc, wacc):
    """Bilinear forward splat of ``img[select]`` displaced by ``(u, v)``."""
    h, w = weight.shape
    ys, xs = np.nonzero(select)
    tx, ty = xs + u[ys, xs], ys + v[ys, xs]
    x0, y0 = np.floor(tx).astype(int), np.floor(ty).astype(int)
    fx, fy = tx - x0, ty - y0
    vals = img[ys, xs]
    base = weight[ys, xs]
    for dx, dy, wk in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xx, yy = x0 + dx, y0 + dy
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h) & (wk > 0)
        wt = wk[ok] * base[ok]
        np.add.at(wacc, (yy[ok], xx[ok]), wt)
        np.add.at(acc, (yy[ok], xx[ok]), vals[ok] * wt[:, None])


def interpolate_frames(a, b, alpha, flow_ab, region=None, min_weight=1e-3):
    """Frame at fraction ``alpha`` between ``a`` (0) and ``b`` (1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.shape[:2] != flow_ab.shape:
        raise ValidationError("frames and flow must share spatial dimensions")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return a.copy()
    h, w = a.shape[:2]
    face = default_face_region(h, w).face if region is None else region.face
    if face.shape != (h, w):
        raise ValidationError("region mask does not match frame size")
    layers = []
    for select in (face, ~face):
        f = _region_flow(flow_ab, select)
        acc = np.zeros((h, w, a.shape[2]))
        wacc = np.zeros((h, w))
        # a moves forward by alpha * f; b moves backward by (1 - alpha) * f (f_ba ~ -f_ab)
        _splat(a, np.full((h, w), 1.0 - alpha), alpha * f.u, alpha * f.v, select, acc, wacc)
        _splat(b, np.full((h, w), alpha), -(1 - alpha) * f.u, -(1 - alpha) * f.v, select, acc, wacc)
        layers.append((acc, wacc))
    fallback = (1 - alpha) * a + alpha * b
    out = fallback.copy()
    (face_acc, face_w), (bg_acc, bg_w) = layers
    bg_ok = bg_w > min_weight
    out[bg_ok] = bg_acc[bg_ok] / bg_w[bg_ok, None]
    face_ok = face_w > min_weight
    out[face_ok] = face_acc[face_ok] / face_w[face_ok, None]
    return out


def source_positions(n_source, target_count):
    """Exact ``(floor_index, fraction)`` pairs for ``s_j = j (T - 1) / (T' - 1)``."""
    if target_count < 1 or n_source < 1:
        raise ValidationError("counts must be >= 1")
    if target_count == 1:
        return [(0, 0.0)]
    den = target_count - 1
    out = []
    for j in range(target_count):
        num = j * (n_source - 1)
        out.append((num // den, (num % den) / den))
    return out


def resample_sequence(frames, target_count, regions=None, flow_fn=dense_flow):
    """Retime ``frames`` to ``target_count`` frames over the same time span."""
    if not isinstance(frames, FrameSequence):
        frames = FrameSequence(frames)
    src = frames.frames
    T = src.shape[0]
    if regions is not None and len(regions) not in (1, T):
        raise ValidationError("regions must hold one mask or one per source frame")
    flows = {}
    out = []
    for i0, frac in source_positions(T, target_count):
        if frac == 0.0:
            out.append(src[i0])
            continue
        if i0 not in flows:
            flows[i0] = flow_fn(src[i0], src[i0 + 1])
        region = None if regions is None else regions[i0 if len(regions) == T else 0]
        out.append(interpolate_frames(src[i0], src[i0 + 1], frac, flows[i0], region).astype(np.float32))
    fps = frames.fps * (target_count / T)
    return FrameSequence(np.stack(out), fps)


def psnr(x, y, peak=1.0):
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(peak ** 2 / mse)


def _to_u8(frames):
    return np.clip(np.round(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)


def write_video(seq, path):
    data = _to_u8(seq.frames)
    T, H, W, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(_FVID.pack(b"FVID", H, W, T, seq.fps))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_video(path):
    raw = Path(path).read_bytes()
    if len(raw) < _FVID.size:
        raise FormatError(f"{path}: truncated header")
    magic, H, W, T, fps = _FVID.unpack_from(raw)
    if magic != b"FVID":
        raise FormatError(f"{path}: bad magic {magic!r}")
    payload = raw[_FVID.size:]
    if len(payload) != T * H * W * 3:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, expected {T * H * W * 3}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(T, H, W, 3)
    return FrameSequence(data, fps)


def write_frame_dir(seq, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(_to_u8(seq.frames)):
        Image.fromarray(frame, "RGB").save(directory / f"{i:06d}.png")


def read_frame_dir(directory, fps=25.0):
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise ValidationError(f"{directory}: no PNG frames found")
    return FrameSequence(np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files]), fps)
