"""Flow propagation, warping, upsampling, and the shared-weight refinement.

Softmax matching only covers pixels whose correspondence is visible in both
frames. Propagation transports flow from well-matched pixels to occluded and
out-of-boundary ones through a parameter-free self-attention over the first
frame's feature self-similarity: every output flow is a convex combination
of input flows, weighted by feature affinity.

Refinement reuses the same enhancement / matching / propagation machinery at
quarter resolution: the coarse flow is upsampled, the second feature map is
warped by it, and only a residual within a small window remains to estimate.
All transformer and attention weights are shared with the coarse stage.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import (
    ConfigError,
    ShapeError,
    bilinear_sample,
    constant,
    conv2d,
    exp,
    matmul,
    relu,
    softmax,
    take_rows,
    transpose,
)
from .backbone import positional_encoding
from .matching import coordinate_grid, local_matching
from .transformer import enhance_features


def propagate_flow(feature, flow, window=None):
    """Reweight flow by feature self-similarity: softmax(F F^T / sqrt(D)) V.

    With ``window=None`` every pixel attends to the whole grid; an odd
    ``window`` restricts attention to the surrounding window x window
    neighborhood with out-of-bounds neighbors excluded before the softmax.
    There are no learned parameters; output values are convex combinations
    of the input flow values.
    """
    h, w, d = feature.shape
    if flow.shape[:2] != (h, w):
        raise ShapeError(f"flow grid {flow.shape} does not match feature {feature.shape}")
    n = h * w
    flat_f = feature.reshape(n, d)
    flat_v = flow.reshape(n, 2)
    scale = 1.0 / math.sqrt(d)

    if window is None:
        scores = matmul(flat_f, transpose(flat_f, (1, 0))) * scale
        weights = softmax(scores, axis=1)
        out = matmul(weights, flat_v)
        return out.reshape(h, w, 2)

    if window < 3 or window % 2 == 0:
        raise ConfigError(f"local propagation window must be odd and >= 3, got {window}")
    r = window // 2
    base = coordinate_grid(h, w, dtype=np.float64).data.reshape(n, 2)
    span = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(span, span, indexing="xy")
    offsets = np.stack([dx.reshape(-1), dy.reshape(-1)], axis=-1)
    nb = base[:, None, :] + offsets[None, :, :]
    nx, ny = nb[..., 0], nb[..., 1]
    valid = (nx >= 0) & (nx <= w - 1) & (ny >= 0) & (ny <= h - 1)
    idx = np.clip(ny, 0, h - 1).astype(np.int64) * w + np.clip(nx, 0, w - 1).astype(np.int64)

    nb_feats = take_rows(flat_f, idx)  # (N, K, D)
    scores = (feature.reshape(n, 1, d) * nb_feats).sum(axis=2) * scale
    valid_c = constant(valid.astype(scores.dtype))
    shift_vals = np.where(valid, scores.data, -np.inf).max(axis=1, keepdims=True)
    shift = constant(shift_vals.astype(scores.dtype))
    fill = constant(np.where(valid, 0.0, shift_vals - 100.0).astype(scores.dtype))
    weights = exp(scores * valid_c + fill - shift) * valid_c
    weights = weights / weights.sum(axis=1, keepdims=True)

    nb_flows = take_rows(flat_v, idx)  # (N, K, 2)
    out = (weights.reshape(n, -1, 1) * nb_flows).sum(axis=1)
    return out.reshape(h, w, 2)


def warp(feature, flow):
    """Sample an (H, W, D) feature at p + flow(p); zero outside the grid."""
    h, w = feature.shape[0], feature.shape[1]
    if flow.shape != (h, w, 2):
        raise ShapeError(f"flow shape {flow.shape} does not match feature {feature.shape}")
    coords = coordinate_grid(h, w, dtype=flow.dtype) + flow
    sampled = bilinear_sample(transpose(feature, (2, 0, 1)), coords)
    return transpose(sampled, (1, 2, 0))


def upsample_flow_bilinear(flow, factor):
    """Spatially upsample (h, w, 2) flow by an integer factor.

    Fine-grid samples use border-replicating bilinear interpolation (grid
    centers aligned), and values are multiplied by the factor to convert
    displacement units between grids. Constant fields stay exactly constant.
    """
    h, w = flow.shape[0], flow.shape[1]
    fine_y = (np.arange(h * factor, dtype=np.float64) + 0.5) / factor - 0.5
    fine_x = (np.arange(w * factor, dtype=np.float64) + 0.5) / factor - 0.5
    fine_y = np.clip(fine_y, 0, h - 1)
    fine_x = np.clip(fine_x, 0, w - 1)
    ys, xs = np.meshgrid(fine_y, fine_x, indexing="ij")
    coords = constant(np.stack([xs, ys], axis=-1).astype(flow.dtype))
    sampled = bilinear_sample(transpose(flow, (2, 0, 1)), coords)
    return transpose(sampled, (1, 2, 0)) * float(factor)


def upsample_flow_2x(flow):
    """One octave up: double the resolution and the displacement units."""
    return upsample_flow_bilinear(flow, 2)


def upsample_param_specs(dim, factor):
    """Head predicting per-pixel convex combination logits for upsampling."""
    hidden = 2 * dim
    return [
        ("conv1.w", (hidden, dim, 3, 3), "fan_in"),
        ("conv1.b", (hidden,), "zero"),
        # zero logits start the head at a uniform (bilinear-like) combination
        ("conv2.w", (factor * factor * 9, hidden, 1, 1), "zero"),
        ("conv2.b", (factor * factor * 9,), "zero"),
    ]


def convex_upsample(flow, feature, params, factor):
    """Upsample coarse flow to factor x resolution via learned convex weights.

    A small head maps the coarse feature to factor^2 x 9 logits per coarse
    pixel; after a softmax over the 9 logits, each fine pixel is a convex
    combination of its coarse 3x3 neighborhood (border-replicated), with
    values scaled by the factor.
    """
    h, w = flow.shape[0], flow.shape[1]
    feat = transpose(feature, (2, 0, 1))
    hid = relu(conv2d(feat, params["conv1.w"], 1, 1) + params["conv1.b"].reshape((-1, 1, 1)))
    logits = conv2d(hid, params["conv2.w"], 1, 0) + params["conv2.b"].reshape((-1, 1, 1))
    logits = transpose(logits, (1, 2, 0)).reshape(h, w, factor, factor, 9)
    weights = softmax(logits, axis=-1)

    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    taps = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            yi = np.clip(ii + di, 0, h - 1)
            xj = np.clip(jj + dj, 0, w - 1)
            taps.append(yi * w + xj)
    idx = np.stack(taps, axis=-1).reshape(h * w, 9)
    neighbors = take_rows(flow.reshape(h * w, 2), idx).reshape(h, w, 1, 1, 9, 2)

    combined = (weights.reshape(h, w, factor, factor, 9, 1) * neighbors).sum(axis=4)
    fine = transpose(combined, (0, 2, 1, 3, 4)).reshape(h * factor, w * factor, 2)
    return fine * float(factor)


def refine(f1_quarter, f2_quarter, coarse_flow, transformer_params, num_blocks,
           splits=8, radius=4, prop_window=3, propagate=True):
    """Residual refinement at 1/4 scale with weights shared from 1/8.

    The coarse 1/8 flow is upsampled 2x and used to warp the second feature
    map, reducing the remaining task to residual estimation: enhancement
    runs with the same transformer weights over splits x splits windows, a
    local window matching recovers the residual around zero, and a small
    local self-attention propagates it. Returns the refined quarter-scale
    flow and the enhanced first feature (the upsampling head's input).
    """
    h4, w4, d = f1_quarter.shape
    up = upsample_flow_2x(coarse_flow)
    f2_warped = warp(f2_quarter, up)
    pos = positional_encoding(h4, w4, d, dtype=f1_quarter.dtype)
    e1, e2 = enhance_features(f1_quarter, f2_warped, pos, transformer_params, num_blocks, splits)
    residual = local_matching(e1, e2, radius)
    flow = up + residual
    if propagate:
        flow = propagate_flow(e1, flow, window=prop_window)
    return flow, e1
