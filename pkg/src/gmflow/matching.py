"""Differentiable correspondence extraction.

Flow is read off a dense similarity comparison instead of being regressed:
correlate every source feature against every target feature, normalize each
source row with a softmax to get a matching distribution, and take the
expectation of the target pixel coordinates. The displacement between that
expectation and the source coordinate is the flow, sub-pixel valued and
differentiable end to end.

The same machinery yields the backward flow for free by transposing the
correlation volume, an occlusion mask via the forward-backward consistency
check, a local-window variant used for residual refinement, and a chunked
evaluation that bounds the correlation memory for large grids.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import (
    ConfigError,
    NumericError,
    ShapeError,
    Tensor,
    bilinear_sample,
    constant,
    exp,
    matmul,
    no_grad,
    softmax,
    take_rows,
    transpose,
)

OCCLUSION_ALPHA = 0.01
OCCLUSION_BETA = 0.5


def coordinate_grid(height, width, dtype=np.float32):
    """(H, W, 2) constant holding each pixel's (x, y) position, so
    grid[i, j] = (j, i)."""
    ys, xs = np.meshgrid(
        np.arange(height, dtype=dtype), np.arange(width, dtype=dtype), indexing="ij"
    )
    return constant(np.stack([xs, ys], axis=-1))


def global_correlation(f1, f2):
    """All-pairs similarity between two (H, W, D) feature maps.

    Returns the (H*W, H*W) matrix of dot products scaled by 1/sqrt(D); the
    scaling keeps magnitudes in a range where the subsequent softmax stays
    well-behaved. Its transpose is exactly the correlation volume of the
    swapped feature pair.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    h, w, d = f1.shape
    flat1 = f1.reshape(h * w, d)
    flat2 = f2.reshape(h * w, d)
    return matmul(flat1, transpose(flat2, (1, 0))) * (1.0 / math.sqrt(d))


def softmax_matching(corr):
    """Row-wise softmax over all target pixels: each source row becomes a
    probability distribution over candidate correspondences."""
    return softmax(corr, axis=1)


def flow_from_matching(matching, grid):
    """Expected target coordinate minus source coordinate, (H, W, 2)."""
    h, w = grid.shape[0], grid.shape[1]
    expected = matmul(matching, grid.reshape(h * w, 2))
    return expected.reshape(h, w, 2) - grid


def gmflow_softmax_flow(f1, f2, grid):
    """Convenience composition: correlation -> softmax -> expectation."""
    return flow_from_matching(softmax_matching(global_correlation(f1, f2)), grid)


def backward_flow_from_transpose(corr, grid):
    """Flow of frame 2 relative to frame 1 from the transposed correlation.

    Algebraically identical to rerunning the forward pipeline on the swapped
    feature pair, without a second network pass.
    """
    return flow_from_matching(softmax_matching(transpose(corr, (1, 0))), grid)


def round_half_away(x):
    """Round with ties away from zero (0.5 -> 1, -0.5 -> -1)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def local_matching(f1, f2, radius, init_flow=None):
    """Softmax matching restricted to a (2r+1)^2 window per pixel.

    Candidates are the integer positions centered at p + round(init_flow(p));
    positions outside the grid are excluded from the softmax entirely, so the
    expectation never includes phantom coordinates. The returned flow is the
    expected candidate coordinate minus p, i.e. the rounded initialization
    plus a soft sub-pixel residual. Gradients flow through the features and
    the soft expectation only, never through the rounding.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    h, w, d = f1.shape
    if radius < 1:
        raise ConfigError(f"local matching radius must be >= 1, got {radius}")
    if 2 * radius + 1 > min(h, w):
        raise ConfigError(
            f"window {2 * radius + 1}x{2 * radius + 1} exceeds the {h}x{w} grid"
        )

    n = h * w
    base = coordinate_grid(h, w, dtype=np.float64).data.reshape(n, 2)
    if init_flow is None:
        centers = base
    else:
        centers = base + round_half_away(np.asarray(init_flow.data, dtype=np.float64).reshape(n, 2))

    span = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(span, span, indexing="xy")
    offsets = np.stack([dx.reshape(-1), dy.reshape(-1)], axis=-1)  # (K, 2)
    cand = centers[:, None, :] + offsets[None, :, :]  # (N, K, 2)
    cx, cy = cand[..., 0], cand[..., 1]
    valid = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)
    if not valid.any(axis=1).all():
        raise ConfigError("a pixel has no in-bounds matching candidates")
    idx = (
        np.clip(cy, 0, h - 1).astype(np.int64) * w + np.clip(cx, 0, w - 1).astype(np.int64)
    )

    k = offsets.shape[0]
    cand_feats = take_rows(f2.reshape(n, d), idx)  # (N, K, D)
    scores = (f1.reshape(n, 1, d) * cand_feats).sum(axis=2) * (1.0 / math.sqrt(d))

    # masked softmax: excluded candidates are pushed far below the per-row
    # valid maximum before the exp (so it cannot overflow) and zeroed after
    # (so their weight is exactly 0); the shift is a constant per row and
    # leaves gradients untouched
    valid_c = constant(valid.astype(scores.dtype))
    shift_vals = np.where(valid, scores.data, -np.inf).max(axis=1, keepdims=True)
    shift = constant(shift_vals.astype(scores.dtype))
    fill = constant(np.where(valid, 0.0, shift_vals - 100.0).astype(scores.dtype))
    weights = exp(scores * valid_c + fill - shift) * valid_c
    weights = weights / weights.sum(axis=1, keepdims=True)

    cand_const = constant(cand.astype(scores.dtype))  # (N, K, 2)
    expected = (weights.reshape(n, k, 1) * cand_const).sum(axis=1)
    flow = expected - constant(base.astype(scores.dtype))
    return flow.reshape(h, w, 2)


def occlusion_from_fb_check(v_fwd, v_bwd, alpha=OCCLUSION_ALPHA, beta=OCCLUSION_BETA):
    """Forward-backward consistency occlusion mask, (H, W) bool.

    A pixel is occluded when the backward flow sampled at its forward target
    fails to cancel the forward flow:
    |v_f + w|^2 > alpha * (|v_f|^2 + |w|^2) + beta, with w the bilinearly
    sampled backward flow (zero beyond the grid).
    """
    fwd = np.asarray(v_fwd.data if isinstance(v_fwd, Tensor) else v_fwd, dtype=np.float64)
    bwd = np.asarray(v_bwd.data if isinstance(v_bwd, Tensor) else v_bwd, dtype=np.float64)
    if fwd.shape != bwd.shape:
        raise ShapeError(f"flow shapes differ: {fwd.shape} vs {bwd.shape}")
    h, w = fwd.shape[:2]
    targets = coordinate_grid(h, w, dtype=np.float64).data + fwd
    with no_grad():
        sampled = bilinear_sample(
            constant(bwd.transpose(2, 0, 1)), constant(targets)
        ).data.transpose(1, 2, 0)
    lhs = ((fwd + sampled) ** 2).sum(axis=-1)
    rhs = alpha * ((fwd**2).sum(axis=-1) + (sampled**2).sum(axis=-1)) + beta
    return lhs > rhs


def chunked_global_matching(f1, f2, splits):
    """Global softmax flow computed over splits^2 groups of source pixels.

    Each group builds only its rows of the correlation volume, so peak
    correlation memory drops by splits^2 while the merged result matches the
    monolithic path to within accumulation noise (<= 1e-6). Group sizes are
    even except for a shorter final chunk when splits^2 does not divide the
    pixel count.
    """
    if splits < 1:
        raise ConfigError(f"splits must be >= 1, got {splits}")
    f1d = np.asarray(f1.data if isinstance(f1, Tensor) else f1)
    f2d = np.asarray(f2.data if isinstance(f2, Tensor) else f2)
    if f1d.shape != f2d.shape:
        raise ShapeError(f"feature shapes differ: {f1d.shape} vs {f2d.shape}")
    if not (np.isfinite(f1d).all() and np.isfinite(f2d).all()):
        raise NumericError("chunked matching received non-finite features")
    h, w, d = f1d.shape
    n = h * w
    flat1 = f1d.reshape(n, d)
    flat2 = f2d.reshape(n, d)
    grid = coordinate_grid(h, w, dtype=f1d.dtype).data.reshape(n, 2)
    scale = 1.0 / math.sqrt(d)

    chunk = -(-n // (splits * splits))  # ceil division
    out = np.empty((n, 2), dtype=f1d.dtype)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        corr = (flat1[start:stop] @ flat2.T) * scale
        corr -= corr.max(axis=1, keepdims=True)
        e = np.exp(corr)
        m = e / e.sum(axis=1, keepdims=True)
        out[start:stop] = m @ grid - grid[start:stop]
    return out.reshape(h, w, 2)
