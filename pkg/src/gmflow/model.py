"""Model assembly: weights, configuration, and the end-to-end forward pass.

The full estimator is: shared backbone features at 1/8 (and 1/4 when
refining), transformer enhancement, global correlation + softmax matching,
self-attention propagation, optional shared-weight refinement, and convex
upsampling to image resolution. One transformer weight set serves both
scales; enabling refinement changes only the upsampling head shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import ConfigError, Tensor, parameter
from .backbone import backbone_param_specs, extract_features, positional_encoding
from .matching import (
    backward_flow_from_transpose,
    coordinate_grid,
    flow_from_matching,
    global_correlation,
    occlusion_from_fb_check,
    softmax_matching,
)
from .propagation import (
    convex_upsample,
    propagate_flow,
    refine,
    upsample_flow_bilinear,
    upsample_param_specs,
)
from .transformer import enhance_features, subparams, transformer_param_specs


class PipelineError(RuntimeError):
    """A forward stage failed; the message names the stage."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters; the defaults are the desk-scale setup."""

    dim: int = 32
    num_blocks: int = 4
    num_splits: int = 2
    refine: bool = False
    refine_splits: int = 8
    refine_radius: int = 4
    refine_prop_window: int = 3
    dtype: str = "float32"

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def upsample_factor(self):
        return 4 if self.refine else 8

    @property
    def required_multiple(self):
        """Image dimensions must divide by this for every window partition."""
        need = 8 * 2 * self.num_splits
        if self.refine:
            need = int(np.lcm(need, 4 * 2 * self.refine_splits))
        return need

    def validate(self):
        if self.dim % 4:
            raise ConfigError(f"feature dimension must be divisible by 4, got {self.dim}")
        if self.num_blocks < 0:
            raise ConfigError(f"num_blocks must be >= 0, got {self.num_blocks}")
        if self.num_splits < 1 or self.refine_splits < 1:
            raise ConfigError("window splits must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        return self


def model_param_specs(config):
    """All (name, shape, init) triples, grouped by owning component."""
    specs = []
    specs += [(f"backbone.{n}", s, i) for n, s, i in backbone_param_specs(config.dim)]
    specs += [
        (f"transformer.{n}", s, i)
        for n, s, i in transformer_param_specs(config.dim, config.num_blocks)
    ]
    specs += [
        (f"upsample.{n}", s, i)
        for n, s, i in upsample_param_specs(config.dim, config.upsample_factor)
    ]
    return specs


def _materialize(spec, rng, dtype):
    name, shape, init = spec
    if init == "zero":
        data = np.zeros(shape, dtype=dtype)
    elif init == "one":
        data = np.ones(shape, dtype=dtype)
    elif init in ("fan_in", "fan_in_relu"):
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else int(shape[0])
        # plain: unit-variance-preserving uniform; relu: Kaiming gain sqrt(2)
        bound = np.sqrt((6.0 if init == "fan_in_relu" else 3.0) / fan_in)
        data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    else:
        raise ValueError(f"unknown init kind {init!r} for {name}")
    return parameter(data, dtype=dtype)


class ModelWeights:
    """All learnable parameters plus the configuration that shaped them."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config, seed=0):
        """Seeded, name-ordered initialization: same seed, same weights."""
        config.validate()
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        params = {
            spec[0]: _materialize(spec, rng, config.np_dtype)
            for spec in model_param_specs(config)
        }
        return cls(config, params)

    def named_parameters(self):
        return self.params.items()

    def astype(self, dtype_name):
        """Copy of the weights in another precision (for gradient checks)."""
        cfg = ModelConfig(**{**asdict(self.config), "dtype": dtype_name})
        params = {
            k: parameter(v.data.astype(cfg.np_dtype)) for k, v in self.params.items()
        }
        return ModelWeights(cfg, params)

    def census(self):
        """Parameter counts per component; the weight-sharing audit trail."""
        groups = {}
        for name, p in self.params.items():
            group = name.split(".", 1)[0]
            groups[group] = groups.get(group, 0) + p.size
        groups["total"] = sum(v for k, v in groups.items() if k != "total")
        return groups

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class ForwardResult:
    """Everything one forward pass produces."""

    flows_by_scale: list  # [(scale, Tensor (H/s, W/s, 2))], coarse to fine
    predictions: list = field(default_factory=list)  # full-res, coarse to fine
    flow: Tensor = None  # final full-resolution flow
    backward_flow: Tensor = None  # full-resolution, inference extra
    occlusion: np.ndarray = None  # full-resolution bool mask


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(f"{name}: {e}") from e


def check_image_shapes(frame1, frame2, config):
    shape1 = tuple(frame1.shape)
    shape2 = tuple(frame2.shape)
    if shape1 != shape2:
        raise ConfigError(f"frame shapes differ: {shape1} vs {shape2}")
    if len(shape1) != 3 or shape1[0] != 3:
        raise ConfigError(f"frames must be (3, H, W), got {shape1}")
    need = config.required_multiple
    h, w = shape1[1], shape1[2]
    if h % need or w % need:
        raise ConfigError(
            f"image dimensions must be divisible by {need} "
            f"(scale x window constraint), got {h}x{w}"
        )


def gmflow_forward(frame1, frame2, weights, *, bidirectional=False,
                   compute_occlusion=False, alpha=0.01, beta=0.5, propagate=True):
    """Full forward pass on one image pair.

    Frames are (3, H, W) tensors (or arrays) normalized to [-1, 1]. Returns a
    :class:`ForwardResult` with per-scale flows, full-resolution supervised
    predictions (one without refinement, two with), and, on request, the
    backward flow obtained from the transposed correlation plus the
    forward-backward occlusion mask. The backward path is inference-only.
    """
    config = weights.config
    if not isinstance(frame1, Tensor):
        frame1 = Tensor(np.asarray(frame1), dtype=config.np_dtype)
    if not isinstance(frame2, Tensor):
        frame2 = Tensor(np.asarray(frame2), dtype=config.np_dtype)
    check_image_shapes(frame1, frame2, config)
    scales = (8, 4) if config.refine else (8,)
    feats = _stage(
        "feature extraction", extract_features,
        frame1, frame2, subparams(weights.params, "backbone."), scales,
    )
    return forward_from_features(
        feats, weights,
        bidirectional=bidirectional, compute_occlusion=compute_occlusion,
        alpha=alpha, beta=beta, propagate=propagate,
    )


def forward_from_features(feats, weights, *, bidirectional=False,
                          compute_occlusion=False, alpha=0.01, beta=0.5,
                          propagate=True):
    """Forward pass from backbone features ({scale: (f1, f2)} dict).

    Split out from :func:`gmflow_forward` so synthetic feature constructions
    can exercise the matching stack directly.
    """
    config = weights.config
    trans = subparams(weights.params, "transformer.")
    up_params = subparams(weights.params, "upsample.")
    f8_1, f8_2 = feats[8]
    h8, w8, d = f8_1.shape

    pos = positional_encoding(h8, w8, d, dtype=config.np_dtype)
    e1, e2 = _stage(
        "feature enhancement", enhance_features,
        f8_1, f8_2, pos, trans, config.num_blocks, config.num_splits,
    )

    grid8 = coordinate_grid(h8, w8, dtype=config.np_dtype)
    corr = _stage("global correlation", global_correlation, e1, e2)
    matching = _stage("softmax matching", softmax_matching, corr)
    v8 = _stage("flow expectation", flow_from_matching, matching, grid8)
    if propagate:
        v8 = _stage("flow propagation", propagate_flow, e1, v8)

    result = ForwardResult(flows_by_scale=[(8, v8)])
    if config.refine:
        intermediate = upsample_flow_bilinear(v8, 8)
        v4, e1q = _stage(
            "refinement", refine,
            feats[4][0], feats[4][1], v8, trans, config.num_blocks,
            config.refine_splits, config.refine_radius,
            config.refine_prop_window, propagate,
        )
        result.flows_by_scale.append((4, v4))
        final = _stage("convex upsampling", convex_upsample, v4, e1q, up_params, 4)
        result.predictions = [intermediate, final]
    else:
        final = _stage("convex upsampling", convex_upsample, v8, e1, up_params, 8)
        result.predictions = [final]
    result.flow = final

    if bidirectional or compute_occlusion:
        vb8 = _stage("backward flow", backward_flow_from_transpose, corr, grid8)
        if propagate:
            vb8 = _stage("backward propagation", propagate_flow, e2, vb8)
        result.backward_flow = upsample_flow_bilinear(vb8, 8)
        if compute_occlusion:
            occ8 = _stage(
                "occlusion check", occlusion_from_fb_check, v8, vb8, alpha, beta
            )
            result.occlusion = np.repeat(np.repeat(occ8, 8, axis=0), 8, axis=1)
    return result
