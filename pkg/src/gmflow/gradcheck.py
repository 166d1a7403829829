"""Finite-difference verification of analytic gradients.

Central differences are the independent oracle for the whole engine: any
differentiable computation expressible as ``f(params) -> scalar`` can be
checked coordinate by coordinate. Checks should run in 64-bit precision;
32-bit rounding noise swamps the O(step^2) truncation error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, backward, no_grad

REL_ERROR_FLOOR = 1e-8


class OracleError(RuntimeError):
    """The function under test violated the oracle's assumptions."""


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference sweep over a set of parameters."""

    step: float
    tolerance: float
    per_param: dict = field(default_factory=dict)  # name -> max relative error

    @property
    def max_rel_error(self):
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def worst(self):
        if not self.per_param:
            return None
        return max(self.per_param, key=self.per_param.get)

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: max rel error {self.max_rel_error:.3e} "
            f"(worst: {self.worst()}, tol {self.tolerance:g}, step {self.step:g})"
        )


def relative_error(analytic, numeric):
    """|a - n| / max(|a|, |n|, floor), element-wise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERROR_FLOOR)
    return np.abs(analytic - numeric) / denom


def grad_check(f, params, step=1e-5, tolerance=1e-3):
    """Compare analytic gradients of ``f(params)`` against central differences.

    ``params`` maps names to parameter tensors; ``f`` must be a deterministic
    function of them returning a scalar tensor. Every coordinate of every
    parameter is perturbed by +/-``step`` and the numeric slope
    ``(f(p + step) - f(p - step)) / (2 step)`` is compared with the recorded
    gradient via :func:`relative_error`.
    """
    if step <= 0:
        raise OracleError(f"finite-difference step must be positive, got {step}")

    def evaluate():
        with no_grad():
            return f(params).item()

    base = evaluate()
    if evaluate() != base:
        raise OracleError("function under test is not deterministic across evaluations")

    for p in params.values():
        p.grad = None
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite at the evaluation point")
    backward(loss)

    report = GradCheckReport(step=step, tolerance=tolerance)
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype)
        numeric = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = evaluate()
            flat[i] = saved - step
            lo = evaluate()
            flat[i] = saved
            nflat[i] = (hi - lo) / (2.0 * step)
        report.per_param[name] = float(relative_error(analytic, numeric).max())
    return report
