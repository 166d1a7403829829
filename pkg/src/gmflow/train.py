"""Training: the weighted multi-prediction loss, AdamW, and the loop.

Supervision is an L1 penalty on every full-resolution flow prediction, with
exponentially increasing weights gamma^(N-i) so later (finer) predictions
dominate. The optimizer is AdamW with decoupled weight decay and global
gradient-norm clipping. Data is addressed purely by iteration index, so a
run is a deterministic function of its config and checkpoint resume is
bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, absolute, backward, constant, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthConfig, synth_sample
from .metrics import compute_metrics
from .model import ForwardResult, ModelConfig, ModelWeights, gmflow_forward

LOSS_GAMMA = 0.9
VALIDATION_SEED_OFFSET = 7919  # keeps held-out samples off the training stream


class LossError(ValueError):
    """The loss is undefined (e.g. no valid pixels)."""


def flow_loss(predictions, gt, valid, gamma=LOSS_GAMMA):
    """Weighted L1 loss over all flow predictions.

    L = sum_i gamma^(N-i) * mean over valid pixels of |V_i - V_gt|_1, where
    the per-pixel L1 norm sums both displacement channels and i runs from 1
    (coarsest) to N (final). Invalid pixels are excluded from the mean.
    """
    if not predictions:
        raise LossError("no predictions to supervise")
    valid = np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise LossError("empty valid mask")
    dtype = predictions[0].dtype
    gt_c = constant(np.asarray(gt), dtype=dtype)
    mask = constant(valid.reshape(valid.shape + (1,)).astype(dtype))
    total = None
    n = len(predictions)
    for i, pred in enumerate(predictions, start=1):
        if pred.shape != gt_c.shape:
            raise LossError(f"prediction shape {pred.shape} != ground truth {gt_c.shape}")
        term = (absolute(pred - gt_c) * mask).sum() / n_valid
        weighted = term * (gamma ** (n - i))
        total = weighted if total is None else total + weighted
    return total


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adamw_init(params):
    """Zeroed first/second moments for every parameter."""
    return {
        "step": 0,
        "m": {name: np.zeros(p.shape, dtype=p.dtype) for name, p in params.items()},
        "v": {name: np.zeros(p.shape, dtype=p.dtype) for name, p in params.items()},
    }


def adamw_step(params, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
    """One decoupled-weight-decay Adam update, in place.

    Moments receive only the gradient; the decay term scales the weights
    directly. Bias correction follows the step counter in `state`.
    """
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}; aborting step")
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / corr1) / (np.sqrt(v / corr2) + eps)
        p.data -= lr * (update + weight_decay * p.data)


def global_grad_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most `max_norm`."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    learning_rate: float = 4e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    gamma: float = LOSS_GAMMA
    seed: int = 0
    deterministic: bool = True
    image_size: int = 64
    max_displacement: float = 12.0
    occluder_fraction: float = 0.0
    dim: int = 32
    num_blocks: int = 4
    num_splits: int = 2
    refine: bool = False
    val_every: int = 250
    val_count: int = 8

    def model_config(self):
        return ModelConfig(
            dim=self.dim,
            num_blocks=self.num_blocks,
            num_splits=self.num_splits,
            refine=self.refine,
        ).validate()

    def data_config(self, seed_offset=0):
        return SynthConfig(
            height=self.image_size,
            width=self.image_size,
            max_displacement=self.max_displacement,
            occluder_fraction=self.occluder_fraction,
            seed=self.seed + seed_offset,
        ).validate()


def validation_epe(weights, data_cfg, count):
    """Mean full-resolution metrics over `count` held-out samples."""
    sums = {"epe_all": 0.0, "s0_10": 0.0, "s10_40": 0.0, "s40plus": 0.0}
    with no_grad():
        for idx in range(count):
            sample = synth_sample(data_cfg, idx)
            result = gmflow_forward(sample.frame1, sample.frame2, weights)
            report = compute_metrics(
                result.flow.data, sample.flow, sample.occlusion, sample.valid
            )
            for key in sums:
                sums[key] += getattr(report, key)
    return {key: value / count for key, value in sums.items()}


def train(cfg, resume_from=None, log_fn=None):
    """Run the training loop; returns (weights, optimizer_state, records).

    Each iteration draws `batch_size` samples addressed by iteration index,
    averages their losses in a single graph, backpropagates, clips the
    global gradient norm, and applies AdamW. Validation EPE on a held-out
    stream is recorded at iteration 0, every `val_every` iterations, and at
    the end. With `resume_from`, optimization continues from the stored
    iteration and matches an uninterrupted run bit-exactly.
    """
    model_cfg = cfg.model_config()
    data_cfg = cfg.data_config()
    val_cfg = cfg.data_config(seed_offset=VALIDATION_SEED_OFFSET)

    start_iteration = 0
    if resume_from is not None:
        weights, extras = load_checkpoint(resume_from)
        if weights.config != model_cfg:
            raise ValueError(
                f"checkpoint config {weights.config} does not match requested {model_cfg}"
            )
        state = extras["optimizer"] or adamw_init(weights.params)
        start_iteration = extras["iteration"] or 0
    else:
        weights = ModelWeights.initialize(model_cfg, seed=cfg.seed)
        state = adamw_init(weights.params)

    records = []
    for iteration in range(start_iteration, cfg.iterations):
        loss = None
        for j in range(cfg.batch_size):
            sample = synth_sample(data_cfg, iteration * cfg.batch_size + j)
            result = gmflow_forward(sample.frame1, sample.frame2, weights)
            term = flow_loss(result.predictions, sample.flow, sample.valid, cfg.gamma)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / cfg.batch_size)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise NumericError(f"non-finite loss at iteration {iteration}")

        weights.zero_grad()
        backward(loss)
        grad_norm = clip_gradients(weights.params, cfg.grad_clip)
        adamw_step(
            weights.params, state, cfg.learning_rate,
            weight_decay=cfg.weight_decay,
        )

        is_val = (
            iteration == start_iteration
            or (iteration + 1) % cfg.val_every == 0
            or iteration == cfg.iterations - 1
        )
        if is_val:
            record = {"iteration": iteration, "loss": loss_value, "grad_norm": grad_norm}
            record.update(validation_epe(weights, val_cfg, cfg.val_count))
            records.append(record)
            if log_fn is not None:
                log_fn(record)

    return weights, state, records


def train_and_save(cfg, checkpoint_path, resume_from=None, log_fn=None):
    """Train, then write the final checkpoint (with optimizer state)."""
    weights, state, records = train(cfg, resume_from=resume_from, log_fn=log_fn)
    save_checkpoint(weights, checkpoint_path, optimizer_state=state, iteration=cfg.iterations)
    return weights, records
