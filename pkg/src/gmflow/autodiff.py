"""Dense array engine with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array plus the tape bookkeeping needed for
backpropagation. Operations record their inputs and a backward rule; calling
:func:`backward` on a scalar loss walks the recorded graph once in reverse
topological order and accumulates gradients into every reachable leaf.

Conventions used throughout the package:

* arrays are row-major, 32-bit by default (64-bit for gradient checks),
* sampling coordinates are (x, y) with x indexing width,
* reductions run in numpy's fixed order, so results are reproducible
  run-to-run on the same platform.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A structural parameter (stride, padding, window size, ...) is invalid."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class GraphError(RuntimeError):
    """Misuse of the recorded computation graph (stale or non-scalar loss)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """A dense array plus reverse-mode differentiation bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_rule", "_spent")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_rule = None
        self._spent = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{grad})"

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """A view of the same data cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def constant(data, dtype=None):
    """A leaf tensor that never receives gradients."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None):
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype))


def _coerce(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _make(data, parents, rule):
    """Wrap an op result, recording the tape edge when gradients are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_rule = rule
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    b = _coerce(b, a)
    data = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), rule)


def sub(a, b):
    b = _coerce(b, a)
    data = a.data - b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), rule)


def mul(a, b):
    b = _coerce(b, a)
    data = a.data * b.data

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), rule)


def div(a, b):
    b = _coerce(b, a)
    data = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), rule)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    data = a.data**p

    def rule(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(data, (a,), rule)


def exp(a):
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def sqrt(a):
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,))


def absolute(a):
    data = np.abs(a.data)

    def rule(g):
        return (g * np.sign(a.data),)

    return _make(data, (a,), rule)


def relu(a):
    data = np.maximum(a.data, 0)

    def rule(g):
        return (g * (a.data > 0),)

    return _make(data, (a,), rule)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).astype(a.dtype, copy=False),)

    return _make(data, (a,), rule)


def tmean(a, axis=None, keepdims=False):
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size / max(data.size, 1)

    def rule(g):
        expanded = _expand_reduced(g, a.shape, axis, keepdims)
        return ((expanded / count).astype(a.dtype, copy=False),)

    return _make(data, (a,), rule)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape):
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)
    return _make(data, (a,), lambda g: (g.transpose(inverse),))


def roll(a, shifts, axes):
    """Cyclic shift along the given axes; backward rolls the other way."""
    data = np.roll(a.data, shifts, axis=axes)

    def rule(g):
        back = tuple(-s for s in shifts) if isinstance(shifts, tuple) else -shifts
        return (np.roll(g, back, axis=axes),)

    return _make(data, (a,), rule)


def getitem(a, idx):
    data = a.data[idx]

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(data, (a,), rule)


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), rule)


def stack(tensors, axis=0):
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def rule(g):
        pieces = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in pieces)

    return _make(data, tuple(tensors), rule)


def pad2d(a, pad):
    """Zero-pad the last two axes by ((top, bottom), (left, right))."""
    (top, bottom), (left, right) = pad
    width = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    data = np.pad(a.data, width)

    def rule(g):
        sl = (Ellipsis, slice(top, top + a.shape[-2]), slice(left, left + a.shape[-1]))
        return (g[sl],)

    return _make(data, (a,), rule)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), rule)


def softmax(a, axis=-1):
    """Numerically stabilized softmax along `axis`; slices sum to one.

    Raises :class:`NumericError` on non-finite input, which would otherwise
    poison the normalization silently.
    """
    if not np.isfinite(a.data).all():
        raise NumericError("softmax received non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((g - inner) * data,)

    return _make(data, (a,), rule)


# ---------------------------------------------------------------------------
# structured kernels
# ---------------------------------------------------------------------------


def _conv_cols(xp, kh, kw, stride_h, stride_w):
    """im2col: padded input (..., C, Hp, Wp) -> (..., C*kh*kw, L) patch matrix."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    windows = windows[..., ::stride_h, ::stride_w, :, :]
    # windows: lead + (C, Ho, Wo, kh, kw); reorder to lead + (C, kh, kw, Ho, Wo)
    lead = windows.shape[:-5]
    c, ho, wo = windows.shape[-5], windows.shape[-4], windows.shape[-3]
    base = len(lead)
    perm = list(range(base)) + [base, base + 3, base + 4, base + 1, base + 2]
    ordered = windows.transpose(perm)
    return ordered.reshape(lead + (c * kh * kw, ho * wo)), ho, wo


def conv2d(x, kernel, stride=1, padding=0):
    """2-D cross-correlation of (C, H, W) or (N, C, H, W) input with an
    (O, C, kh, kw) kernel.

    Output spatial size is floor((H + 2*pad - kh) / stride) + 1.
    """
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if sh <= 0 or sw <= 0:
        raise ConfigError(f"conv2d stride must be positive, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ConfigError(f"conv2d padding must be non-negative, got {(ph, pw)}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    o, c, kh, kw = kernel.shape
    if x.shape[-3] != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ConfigError(
            f"kernel {(kh, kw)} does not fit input {(h, w)} with padding {(ph, pw)}"
        )

    xp = np.pad(x.data, [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)])
    cols, ho, wo = _conv_cols(xp, kh, kw, sh, sw)
    cols = np.ascontiguousarray(cols)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = kmat @ cols  # (..., O, L)
    out = out.reshape(x.shape[:-3] + (o, ho, wo))

    def rule(g):
        gf = g.reshape(g.shape[:-3] + (o, ho * wo))
        gk = (gf @ np.swapaxes(cols, -1, -2)).reshape((-1, o, c * kh * kw)).sum(axis=0)
        gcols = np.swapaxes(kmat, -1, -2) @ gf  # (..., C*kh*kw, L)
        gcols = gcols.reshape(g.shape[:-3] + (c, kh, kw, ho, wo))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for a_ in range(kh):
            for b_ in range(kw):
                gxp[..., a_ : a_ + sh * ho : sh, b_ : b_ + sw * wo : sw] += gcols[
                    ..., a_, b_, :, :
                ]
        sl = (Ellipsis, slice(ph, ph + h), slice(pw, pw + w))
        return gxp[sl], gk.reshape(kernel.shape)

    return _make(out, (x, kernel), rule)


def bilinear_sample(feature, coords):
    """Sample (C, H, W) at (H', W', 2) pixel coordinates (x, y), zero outside.

    Each sample bilinearly blends the four surrounding grid values; neighbors
    falling outside [0, W-1] x [0, H-1] contribute zero, so samples strictly
    outside the grid return exactly zero. Differentiable in both arguments.
    """
    if feature.ndim != 3 or coords.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(
            f"bilinear_sample expects (C,H,W) and (H',W',2), got {feature.shape} and {coords.shape}"
        )
    c, h, w = feature.shape
    x = coords.data[..., 0]
    y = coords.data[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    taps = []  # (weight, dweight/dx, dweight/dy, mask, flat index)
    for dy, wy, dwy in ((0, 1.0 - fy, -1.0), (1, fy, 1.0)):
        for dx, wx, dwx in ((0, 1.0 - fx, -1.0), (1, fx, 1.0)):
            xi = x0 + dx
            yi = y0 + dy
            mask = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            taps.append((wx * wy, dwx * wy, wx * dwy, mask, idx))

    flat = feature.data.reshape(c, h * w)
    out = np.zeros((c,) + x.shape, dtype=feature.dtype)
    for weight, _, _, mask, idx in taps:
        out += flat[:, idx] * (weight * mask)

    def rule(g):
        gfeat = np.zeros((h * w, c), dtype=g.dtype)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gy = np.zeros(x.shape, dtype=g.dtype)
        gt = np.moveaxis(g, 0, -1)  # (H', W', C)
        for weight, dwx, dwy, mask, idx in taps:
            contrib = gt * (weight * mask)[..., None]
            np.add.at(gfeat, idx.reshape(-1), contrib.reshape(-1, c))
            vals = np.moveaxis(flat[:, idx], 0, -1)  # (H', W', C)
            inner = (gt * vals).sum(axis=-1) * mask
            gx += inner * dwx
            gy += inner * dwy
        gcoords = np.stack([gx, gy], axis=-1)
        return gfeat.T.reshape(feature.shape), gcoords

    return _make(out, (feature, coords), rule)


def take_rows(mat, idx):
    """Gather rows of a (P, D) matrix with an integer index array; the
    backward pass scatter-adds into the source rows."""
    if mat.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D source, got {mat.shape}")
    idx = np.asarray(idx)
    data = mat.data[idx]

    def rule(g):
        gm = np.zeros(mat.shape, dtype=g.dtype)
        np.add.at(gm, idx.reshape(-1), g.reshape(-1, mat.shape[1]))
        return (gm,)

    return _make(data, (mat,), rule)


def linear(x, weight, bias=None):
    """Affine map on the last axis: x @ weight + bias."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (weight.shape[-1],))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root):
    """Iterative post-order over the recorded graph (graphs can be deep)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate `.grad` on every leaf reachable from a scalar `loss`.

    The recorded graph is consumed: a second call on the same loss raises
    :class:`GraphError` (run a fresh forward pass instead).
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise GraphError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        raise GraphError("loss does not require gradients; nothing to differentiate")
    loss._spent = True

    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        rule = node._backward_rule
        if rule is None or node.grad is None:
            continue
        grads = rule(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = g.astype(parent.dtype, copy=False)
            if g.shape != parent.shape:
                g = g.reshape(parent.shape)
            # accumulation never mutates in place, so sharing views is safe
            parent.grad = g if parent.grad is None else parent.grad + g
        # free intermediate state so a stale graph cannot be rewalked
        node._backward_rule = None
        if node._parents:
            node.grad = None
