"""Synthetic optical-flow data with dense ground truth and occlusion masks.

Each sample is built so the ground truth is exact by construction: the
second frame is a pristine crop of a larger band-limited noise canvas, and
the first frame is the same canvas resampled at positions shifted by the
background translation. Warping frame 2 back by the ground-truth flow then
reproduces frame 1 bit-for-bit up to interpolation arithmetic, which the
tests use as a self-consistency oracle.

An optional occluder is a smaller independently textured square painted
into both frames with its own integer translation: background pixels whose
targets land under it (or off the frame) are marked occluded, exactly like
the unmatched regions the flow propagation stage is meant to fix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import ConfigError, constant, bilinear_sample, no_grad


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    max_displacement: float = 12.0
    occluder_fraction: float = 0.0
    texture_smoothness: float = 1.5
    seed: int = 0

    def validate(self):
        if self.max_displacement >= min(self.height, self.width):
            raise ConfigError(
                f"max displacement {self.max_displacement} must stay below the "
                f"{self.height}x{self.width} image extent"
            )
        if not 0.0 <= self.occluder_fraction < 0.5:
            raise ConfigError(
                f"occluder fraction must be in [0, 0.5), got {self.occluder_fraction}"
            )
        return self


@dataclass
class Sample:
    frame1: np.ndarray  # (3, H, W) float32 in [-1, 1]
    frame2: np.ndarray  # (3, H, W) float32 in [-1, 1]
    flow: np.ndarray  # (H, W, 2) float32, (u, v) displacements
    occlusion: np.ndarray  # (H, W) bool, True = occluded / out of bounds
    valid: np.ndarray  # (H, W) bool


def _texture(rng, shape, smoothness):
    """Band-limited noise in [-0.9, 0.9]; pure white noise defeats bilinear
    resampling, so smooth it just enough to be locally interpolable."""
    noise = rng.standard_normal(shape)
    smooth = np.stack([gaussian_filter(c, smoothness) for c in noise])
    smooth /= np.abs(smooth).max() + 1e-12
    return 0.9 * smooth


def _sample_canvas(canvas, coords):
    with no_grad():
        out = bilinear_sample(constant(canvas), constant(coords)).data
    return out


def synth_sample(cfg, index):
    """Generate the deterministic sample for (cfg, index).

    Generation is stateless: the same config and index always produce the
    same sample, independent of call order, so training data is addressable
    by iteration index and resume is exact.
    """
    cfg.validate()
    h, w = cfg.height, cfg.width
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(index,)))
    margin = int(math.ceil(cfg.max_displacement)) + 2

    canvas = _texture(rng, (3, h + 2 * margin, w + 2 * margin), cfg.texture_smoothness)
    t1 = rng.uniform(-cfg.max_displacement, cfg.max_displacement, size=2)

    frame2 = canvas[:, margin : margin + h, margin : margin + w].copy()
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([xs + t1[0] + margin, ys + t1[1] + margin], axis=-1)
    frame1 = _sample_canvas(canvas, coords)

    flow = np.empty((h, w, 2), dtype=np.float64)
    flow[..., 0] = t1[0]
    flow[..., 1] = t1[1]

    target_x = xs + t1[0]
    target_y = ys + t1[1]
    occlusion = (target_x < 0) | (target_x > w - 1) | (target_y < 0) | (target_y > h - 1)

    if cfg.occluder_fraction > 0.0:
        side = max(4, int(round(math.sqrt(cfg.occluder_fraction * h * w))))
        side = min(side, min(h, w) - 2)
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        max_t2 = int(round(cfg.max_displacement))
        t2 = rng.integers(-max_t2, max_t2 + 1, size=2)  # integer motion, exact copy

        obj = _texture(rng, (3, side, side), cfg.texture_smoothness)
        frame1[:, top : top + side, left : left + side] = obj
        flow[top : top + side, left : left + side, 0] = t2[0]
        flow[top : top + side, left : left + side, 1] = t2[1]

        # paint the object into frame 2 at its translated position
        dst_top, dst_left = top + int(t2[1]), left + int(t2[0])
        src_i0 = max(0, -dst_top)
        src_j0 = max(0, -dst_left)
        src_i1 = side - max(0, dst_top + side - h)
        src_j1 = side - max(0, dst_left + side - w)
        painted = np.zeros((h, w), dtype=bool)
        if src_i1 > src_i0 and src_j1 > src_j0:
            di0, dj0 = dst_top + src_i0, dst_left + src_j0
            di1, dj1 = dst_top + src_i1, dst_left + src_j1
            frame2[:, di0:di1, dj0:dj1] = obj[:, src_i0:src_i1, src_j0:src_j1]
            painted[di0:di1, dj0:dj1] = True

        # object pixels clipped out of frame 2 are unmatched
        obj_occ = np.zeros((side, side), dtype=bool)
        obj_occ[:] = True
        obj_occ[src_i0:src_i1, src_j0:src_j1] = False
        obj_mask = np.zeros((h, w), dtype=bool)
        obj_mask[top : top + side, left : left + side] = True
        occlusion[top : top + side, left : left + side] = obj_occ

        # background pixels whose bilinear support touches the painted
        # region are covered by the occluder in frame 2
        x0 = np.floor(target_x).astype(np.int64)
        y0 = np.floor(target_y).astype(np.int64)
        covered = np.zeros((h, w), dtype=bool)
        for dy in (0, 1):
            for dx in (0, 1):
                xi = np.clip(x0 + dx, 0, w - 1)
                yi = np.clip(y0 + dy, 0, h - 1)
                covered |= painted[yi, xi]
        occlusion |= covered & ~obj_mask
        # restore out-of-bounds marking for background pixels
        bg_oob = (target_x < 0) | (target_x > w - 1) | (target_y < 0) | (target_y > h - 1)
        occlusion |= bg_oob & ~obj_mask

    return Sample(
        frame1=frame1.astype(np.float32),
        frame2=frame2.astype(np.float32),
        flow=flow.astype(np.float32),
        occlusion=occlusion,
        valid=np.ones((h, w), dtype=bool),
    )
