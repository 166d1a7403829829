"""Joint feature enhancement with shifted-window self/cross attention.

Each block applies, in order: windowed self-attention, windowed
cross-attention between the two frames (spatially corresponding windows,
shared weights, symmetric in the frame order), and a feed-forward network
with 4x hidden expansion. Sub-layers use pre-normalization and residual
connections, single-head attention throughout.

The feature map splits into a fixed number of K x K windows rather than
fixed-size windows, so the window size adapts to the feature resolution.
Consecutive blocks alternate between the plain partition and one shifted by
half a window, realized as a cyclic roll.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .autodiff import (
    ConfigError,
    linear,
    matmul,
    relu,
    roll,
    softmax,
    sqrt,
    transpose,
)

LAYER_NORM_EPS = 1e-6
FFN_EXPANSION = 4


@dataclass(frozen=True)
class WindowConfig:
    """Partition of a feature map into splits x splits windows."""

    splits: int
    shifted: bool = False


def transformer_param_specs(dim, num_blocks):
    """Ordered (name, shape, init) triples for the enhancement stack."""
    specs = []
    for i in range(num_blocks):
        base = f"block{i}"
        for attn in ("self", "cross"):
            for proj in ("q", "k", "v", "o"):
                specs.append((f"{base}.{attn}.{proj}.w", (dim, dim), "fan_in"))
                # a key bias shifts every score in a softmax row uniformly,
                # so it is unidentifiable; omit it
                if proj != "k":
                    specs.append((f"{base}.{attn}.{proj}.b", (dim,), "zero"))
        for norm in ("norm1", "norm2", "norm3"):
            specs.append((f"{base}.{norm}.g", (dim,), "one"))
            specs.append((f"{base}.{norm}.b", (dim,), "zero"))
        hidden = FFN_EXPANSION * dim
        specs.append((f"{base}.ffn.fc1.w", (dim, hidden), "fan_in"))
        specs.append((f"{base}.ffn.fc1.b", (hidden,), "zero"))
        # zero-initialized output keeps fresh blocks near-identity
        specs.append((f"{base}.ffn.fc2.w", (hidden, dim), "zero"))
        specs.append((f"{base}.ffn.fc2.b", (dim,), "zero"))
    return specs


def subparams(params, prefix):
    """View of a flat parameter dict restricted to one prefix."""
    cut = len(prefix)
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix)}


def _check_partition(height, width, splits):
    if splits < 1:
        raise ConfigError(f"window splits must be >= 1, got {splits}")
    if height % (2 * splits) or width % (2 * splits):
        raise ConfigError(
            f"feature size {height}x{width} must tile into {splits}x{splits} windows "
            f"under both partitions (divisible by {2 * splits})"
        )


def split_windows(feature, cfg):
    """(H, W, D) -> (K*K, H/K, W/K, D) window tensor.

    The shifted partition first rolls the feature cyclically by half a
    window, (H/2K, W/2K), then tiles; :func:`merge_windows` inverts exactly.
    """
    h, w, d = feature.shape
    k = cfg.splits
    _check_partition(h, w, k)
    if cfg.shifted:
        feature = roll(feature, (-(h // (2 * k)), -(w // (2 * k))), (0, 1))
    wins = feature.reshape(k, h // k, k, w // k, d)
    wins = transpose(wins, (0, 2, 1, 3, 4))
    return wins.reshape(k * k, h // k, w // k, d)


def merge_windows(windows, cfg, height, width):
    """Inverse of :func:`split_windows`."""
    k = cfg.splits
    d = windows.shape[-1]
    x = windows.reshape(k, k, height // k, width // k, d)
    x = transpose(x, (0, 2, 1, 3, 4)).reshape(height, width, d)
    if cfg.shifted:
        x = roll(x, (height // (2 * k), width // (2 * k)), (0, 1))
    return x


def layer_norm(x, gain, bias):
    """Normalize the channel axis to zero mean / unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + LAYER_NORM_EPS) * gain + bias


def attention(query, key, value, proj):
    """Single-head scaled dot-product attention with learned projections.

    Inputs are (L, D) or batched (B, L, D); `proj` holds the q/k/v/o weight
    and bias tensors. Scores are scaled by 1/sqrt(D) before the softmax.
    """
    q = linear(query, proj["q.w"], proj["q.b"])
    k = linear(key, proj["k.w"], proj.get("k.b"))
    v = linear(value, proj["v.w"], proj["v.b"])
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    weights = softmax(scores * scale, axis=-1)
    return linear(matmul(weights, v), proj["o.w"], proj["o.b"])


def _windowed_attention(q_feat, kv_feat, proj, cfg):
    h, w, d = q_feat.shape
    qw = split_windows(q_feat, cfg)
    kw = qw if kv_feat is q_feat else split_windows(kv_feat, cfg)
    win = (qw.shape[1], qw.shape[2])
    tokens = win[0] * win[1]
    out = attention(
        qw.reshape(-1, tokens, d), kw.reshape(-1, tokens, d), kw.reshape(-1, tokens, d), proj
    )
    return merge_windows(out.reshape(-1, win[0], win[1], d), cfg, h, w)


def _ffn(x, params):
    return linear(relu(linear(x, params["fc1.w"], params["fc1.b"])), params["fc2.w"], params["fc2.b"])


def transformer_block(f1, f2, params, cfg):
    """One enhancement block applied symmetrically to both frames.

    Self-attention runs within each frame, cross-attention pairs the
    spatially corresponding windows of the two frames (frame 1 queries
    frame 2 and vice versa with the same weights), then the FFN. Every
    sub-layer is pre-normalized and residual.
    """
    if f1.shape != f2.shape:
        raise ConfigError(f"frame features differ in shape: {f1.shape} vs {f2.shape}")
    self_proj = subparams(params, "self.")
    cross_proj = subparams(params, "cross.")

    n1 = layer_norm(f1, params["norm1.g"], params["norm1.b"])
    n2 = layer_norm(f2, params["norm1.g"], params["norm1.b"])
    f1 = f1 + _windowed_attention(n1, n1, self_proj, cfg)
    f2 = f2 + _windowed_attention(n2, n2, self_proj, cfg)

    n1 = layer_norm(f1, params["norm2.g"], params["norm2.b"])
    n2 = layer_norm(f2, params["norm2.g"], params["norm2.b"])
    f1, f2 = (
        f1 + _windowed_attention(n1, n2, cross_proj, cfg),
        f2 + _windowed_attention(n2, n1, cross_proj, cfg),
    )

    ffn_params = subparams(params, "ffn.")
    f1 = f1 + _ffn(layer_norm(f1, params["norm3.g"], params["norm3.b"]), ffn_params)
    f2 = f2 + _ffn(layer_norm(f2, params["norm3.g"], params["norm3.b"]), ffn_params)
    return f1, f2


def enhance_features(f1, f2, pos, params, num_blocks, splits):
    """Stack `num_blocks` blocks over both frames.

    The positional encoding is added once to both inputs before the first
    block; block i uses the shifted partition iff i is odd, so consecutive
    blocks alternate and connect neighboring windows. With zero blocks the
    inputs pass through with only the position information added.
    """
    f1 = f1 + pos
    f2 = f2 + pos
    for i in range(num_blocks):
        cfg = WindowConfig(splits=splits, shifted=bool(i % 2))
        f1, f2 = transformer_block(f1, f2, subparams(params, f"block{i}."), cfg)
    return f1, f2
