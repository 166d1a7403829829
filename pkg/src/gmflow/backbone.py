"""Convolutional feature extraction and fixed positional encodings.

Both frames pass through one weight-sharing residual trunk that downsamples
to 1/4 resolution; a final shared-weight 3x3 convolution produces the 1/8
feature map with stride 2 and, when the refinement stage is active, the 1/4
map with stride 1. Sharing the head keeps the multi-scale features in the
same embedding space without adding parameters.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ConfigError, constant, conv2d, relu, transpose

POSITION_TEMPERATURE = 10000.0


def backbone_channels(dim):
    """Trunk widths scale with the configured feature dimension."""
    return max(dim // 2, 4), dim


def backbone_param_specs(dim):
    """Ordered (name, shape, init) triples for every backbone parameter.

    The trunk has no normalization layers, so ReLU-gain initialization is
    what keeps activation magnitude roughly constant through the depth.
    """
    c1, c2 = backbone_channels(dim)
    specs = []

    def conv(name, out_ch, in_ch, k, init="fan_in_relu"):
        specs.append((f"{name}.w", (out_ch, in_ch, k, k), init))
        specs.append((f"{name}.b", (out_ch,), "zero"))

    conv("stem", c1, 3, 7)
    for block in ("res1a", "res1b"):
        conv(f"{block}.conv1", c1, c1, 3)
        conv(f"{block}.conv2", c1, c1, 3)
    conv("down", c2, c1, 3)
    for block in ("res2a", "res2b"):
        conv(f"{block}.conv1", c2, c2, 3)
        conv(f"{block}.conv2", c2, c2, 3)
    conv("head", dim, c2, 3, init="fan_in")
    return specs


def _conv(x, params, name, stride, padding):
    out = conv2d(x, params[f"{name}.w"], stride=stride, padding=padding)
    bias = params[f"{name}.b"]
    return out + bias.reshape((-1, 1, 1))


def _res_block(x, params, name):
    y = relu(_conv(x, params, f"{name}.conv1", 1, 1))
    y = _conv(y, params, f"{name}.conv2", 1, 1)
    return relu(x + y)


def backbone_trunk(image, params):
    """(3, H, W) image in [-1, 1] -> (C, H/4, W/4) trunk activations."""
    x = relu(_conv(image, params, "stem", 2, 3))
    x = _res_block(x, params, "res1a")
    x = _res_block(x, params, "res1b")
    x = relu(_conv(x, params, "down", 2, 1))
    x = _res_block(x, params, "res2a")
    x = _res_block(x, params, "res2b")
    return x


def backbone_head(trunk, params, scale):
    """Project trunk activations to the feature space at scale 8 or 4.

    The same convolution weights serve both scales; only the stride differs
    (2 for the 1/8 map, 1 for the 1/4 map).
    """
    if scale not in (8, 4):
        raise ConfigError(f"feature scale must be 8 or 4, got {scale}")
    return _conv(trunk, params, "head", 2 if scale == 8 else 1, 1)


def extract_features(frame1, frame2, params, scales=(8,)):
    """Run both frames through the shared trunk and requested heads.

    Returns a dict mapping scale -> (f1, f2) feature tensors laid out
    (H/scale, W/scale, D). Swapping the input frames swaps the outputs
    exactly because every weight is shared.
    """
    h, w = frame1.shape[-2], frame1.shape[-1]
    if frame1.shape != frame2.shape:
        raise ConfigError(f"frame shapes differ: {frame1.shape} vs {frame2.shape}")
    if h % 8 or w % 8:
        raise ConfigError(
            f"image dimensions must be divisible by 8, got {h}x{w}"
        )
    out = {}
    trunks = (backbone_trunk(frame1, params), backbone_trunk(frame2, params))
    for scale in sorted(scales, reverse=True):
        pair = tuple(
            transpose(backbone_head(t, params, scale), (1, 2, 0)) for t in trunks
        )
        out[scale] = pair
    return out


def positional_encoding(height, width, dim, dtype=np.float32):
    """Fixed 2-D sine/cosine position features, (H, W, D) in [-1, 1].

    The first D/2 channels encode the row coordinate, the rest the column;
    within each half, sin/cos pairs interleave over a geometric frequency
    ladder with base temperature 10000.
    """
    if dim % 4:
        raise ConfigError(f"positional encoding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = POSITION_TEMPERATURE ** (-np.arange(quarter, dtype=np.float64) / quarter)
    ys = np.arange(height, dtype=np.float64)[:, None] * freqs[None, :]  # (H, q)
    xs = np.arange(width, dtype=np.float64)[:, None] * freqs[None, :]  # (W, q)
    pe = np.zeros((height, width, dim), dtype=np.float64)
    half = dim // 2
    pe[:, :, 0:half:2] = np.sin(ys)[:, None, :]
    pe[:, :, 1:half:2] = np.cos(ys)[:, None, :]
    pe[:, :, half::2] = np.sin(xs)[None, :, :]
    pe[:, :, half + 1 :: 2] = np.cos(xs)[None, :, :]
    return constant(pe.astype(dtype))
