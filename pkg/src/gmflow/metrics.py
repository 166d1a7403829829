"""End-point-error metrics with magnitude buckets and outlier rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

F1_PIXEL_THRESHOLD = 3.0
F1_RELATIVE_THRESHOLD = 0.05
BUCKET_EDGES = (10.0, 40.0)


class MetricsError(ValueError):
    """Metrics requested over an empty pixel set."""


@dataclass
class MetricsReport:
    """Per-field averages in pixels; f1_all in percent; counts alongside.

    `epe_all * n_all == epe_matched * n_matched + epe_unmatched * n_unmatched`
    holds by construction (all three are sums over disjoint pixel sets
    divided by their counts).
    """

    epe_all: float
    epe_matched: float
    epe_unmatched: float
    s0_10: float
    s10_40: float
    s40plus: float
    f1_all: float
    n_all: int
    n_matched: int
    n_unmatched: int
    n_s0_10: int
    n_s10_40: int
    n_s40plus: int

    def to_dict(self):
        """The report schema: exactly the seven metric fields."""
        return {
            "epe_all": self.epe_all,
            "epe_matched": self.epe_matched,
            "epe_unmatched": self.epe_unmatched,
            "s0_10": self.s0_10,
            "s10_40": self.s10_40,
            "s40plus": self.s40plus,
            "f1_all": self.f1_all,
        }


def _mean(values, mask):
    count = int(mask.sum())
    return (float(values[mask].sum() / count) if count else 0.0), count


def compute_metrics(pred, gt, occlusion=None, valid=None):
    """Compare a predicted flow field against ground truth.

    Per-pixel EPE is the L2 distance between flow vectors. Buckets follow
    the ground-truth motion magnitude ([0,10), [10,40), [40,inf)); matched
    means non-occluded; F1-all is the percentage of valid pixels with
    EPE > 3 px and EPE > 5% of the ground-truth magnitude.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricsError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    h, w = gt.shape[:2]
    if valid is None:
        valid = np.ones((h, w), dtype=bool)
    if occlusion is None:
        occlusion = np.zeros((h, w), dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise MetricsError("no valid pixels to evaluate")

    epe = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    mag = np.sqrt((gt**2).sum(axis=-1))

    epe_all, n_all = _mean(epe, valid)
    epe_matched, n_matched = _mean(epe, valid & ~occlusion)
    epe_unmatched, n_unmatched = _mean(epe, valid & occlusion)

    lo, hi = BUCKET_EDGES
    s0, n_s0 = _mean(epe, valid & (mag < lo))
    s1, n_s1 = _mean(epe, valid & (mag >= lo) & (mag < hi))
    s2, n_s2 = _mean(epe, valid & (mag >= hi))

    outlier = valid & (epe > F1_PIXEL_THRESHOLD) & (epe > F1_RELATIVE_THRESHOLD * mag)
    f1 = 100.0 * float(outlier.sum()) / n_all

    return MetricsReport(
        epe_all=epe_all,
        epe_matched=epe_matched,
        epe_unmatched=epe_unmatched,
        s0_10=s0,
        s10_40=s1,
        s40plus=s2,
        f1_all=f1,
        n_all=n_all,
        n_matched=n_matched,
        n_unmatched=n_unmatched,
        n_s0_10=n_s0,
        n_s10_40=n_s1,
        n_s40plus=n_s2,
    )
