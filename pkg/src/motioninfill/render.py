"""Toy renderer turning motion latents into frames.

Stands in for a neural face decoder so video-domain metrics can be run on
synthetic edits: 21 Gaussian blobs (one per expression keypoint) on a face
ellipse, displaced by the expression offsets, shifted by the translation and
rotated in-plane by a small angle read from the rotation block.
"""

from __future__ import annotations

import numpy as np

from .motion_core import DELTA_WIDTH, ROT_WIDTH, FrameSequence

__all__ = ["render_motion"]


def _identity(seed, size):
    rng = np.random.default_rng([seed, 99])
    angles = np.linspace(0, 2 * np.pi, 21, endpoint=False)
    radius = size * rng.uniform(0.12, 0.22, size=21)
    canon = np.stack([np.cos(angles) * radius, np.sin(angles) * radius * 1.2], axis=1)
    return {
        "canon": canon,
        "skin": rng.uniform(0.4, 0.8, size=3),
        "blob": rng.uniform(0.0, 0.3, size=3),
        "background": rng.uniform(0.1, 0.3, size=3),
        "axes": size * rng.uniform(0.28, 0.34, size=2),
    }


def render_motion(motion, size=64, identity_seed=0, blob_sigma=2.0, scale=1.5):
    """Render ``motion`` as an ``(T, size, size, 3)`` frame sequence in ``[0, 1]``."""
    ident = _identity(identity_seed, size)
    data = motion.data.astype(np.float64)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    frames = np.empty((data.shape[0], size, size, 3), dtype=np.float32)
    for i, row in enumerate(data):
        delta = row[:DELTA_WIDTH].reshape(21, 3)
        rot = row[DELTA_WIDTH:DELTA_WIDTH + ROT_WIDTH]
        trans = row[DELTA_WIDTH + ROT_WIDTH:]
        theta = 0.05 * rot[1]
        cos, sin = np.cos(theta), np.sin(theta)
        pts = ident["canon"] + scale * delta[:, :2]
        pts = pts @ np.array([[cos, sin], [-sin, cos]])
        cx, cy = c + 2 * scale * trans[0], c + 2 * scale * trans[1]
        face = (((x - cx) / ident["axes"][0]) ** 2 + ((y - cy) / ident["axes"][1]) ** 2) <= 1.0
        img = np.where(face[..., None], ident["skin"], ident["background"])
        blobs = np.zeros((size, size))
        for px, py in pts:
            blobs += np.exp(-((x - cx - px) ** 2 + (y - cy - py) ** 2) / (2 * blob_sigma ** 2))
        blobs = np.clip(blobs, 0, 1)[..., None]
        img = img * (1 - blobs) + ident["blob"] * blobs
        frames[i] = np.clip(img, 0, 1)
    return FrameSequence(frames, motion.fps)
