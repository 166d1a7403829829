"""Global-matching optical flow at desk scale.

Dense two-frame optical flow estimated by comparing all pairwise feature
similarities: a small convolutional backbone, shifted-window transformer
feature enhancement, differentiable softmax matching over a global
correlation volume, self-attention flow propagation, and an optional
shared-weight refinement stage at higher resolution. Everything runs on a
self-contained numpy-backed reverse-mode autodiff engine.

This package intentionally keeps ``gmflow/__init__`` import-light so the
CLI can configure thread limits before numpy loads. Import functionality
from the submodules directly, e.g. ``from gmflow.autodiff import Tensor``
or ``from gmflow.model import gmflow_forward``.
"""

__version__ = "0.1.0"
