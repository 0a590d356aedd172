"""Tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient.  Running the same code outside a
``with Tape():`` block evaluates eagerly without recording anything, which
is how inference passes are done.

Example
-------
>>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = sum_(square(x))
>>> grads = backward(tape, loss)
>>> grads[x.node_id].tolist()
[2.0, 4.0, 6.0]
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (InvalidDimension, NonFiniteValue, NonScalarLoss,
                     ShapeError, TapeReuse)

_ids = itertools.count(1)
_local = threading.local()
_default_dtype = np.float32


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


def get_default_dtype():
    return _default_dtype


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for tensors built from Python data."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _default_dtype
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and 0 in arr.shape:
            raise InvalidDimension(f"zero-size dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.node_id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, name=self.name)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return (f"Tensor(shape={self.shape}, dtype={self.dtype}"
                f"{label}, requires_grad={self.requires_grad})")

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations; topological order is record order."""

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, backward_fn):
        self.records.append((op, inputs, output, backward_fn))


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _coerce(a, b):
    # python scalars adopt the dtype of the tensor they meet
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


check_finite = True


def _result(op, data, inputs, backward_fn):
    if check_finite and not np.isfinite(data).all():
        if all(np.isfinite(t.data).all() for t in inputs):
            raise NonFiniteValue(f"{op} produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(tape, loss, params=None):
    """Propagate gradients of a scalar ``loss`` back through ``tape``.

    Leaf tensors (those not produced by a recorded op) that require a gradient
    get their ``.grad`` set.  ``params`` lists tensors that should receive a
    zero gradient when the loss does not depend on them.

    Returns a dict mapping ``node_id`` to the gradient array of every leaf.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeReuse("tape already consumed by a backward pass")
    tape.consumed = True

    produced = set()
    leaves = {}
    for _, inputs, output, _ in tape.records:
        produced.add(output.node_id)
        for t in inputs:
            if t.requires_grad and t.node_id not in produced:
                leaves[t.node_id] = t

    grads = {loss.node_id: np.ones_like(loss.data)}
    for _, inputs, output, fn in reversed(tape.records):
        g = grads.get(output.node_id)
        if g is None:
            continue
        if output.node_id not in leaves:
            del grads[output.node_id]
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi

    result = {}
    for node_id, t in leaves.items():
        g = grads.get(node_id)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        result[node_id] = t.grad
    if loss.requires_grad and not tape.records:
        loss.grad = np.ones_like(loss.data)
        result[loss.node_id] = loss.grad
    for p in params or ():
        if p.node_id not in result:
            p.grad = np.zeros_like(p.data)
            result[p.node_id] = p.grad
    return result


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _coerce(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _coerce(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _coerce(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))
    return _result("mul", a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _coerce(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _result("div", out, (a, b), bw)


def neg(a):
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def square(a):
    return _result("square", a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def reciprocal(a):
    out = 1.0 / a.data
    return _result("reciprocal", out, (a,), lambda g: (-g * out * out,))


def log(a, floor=None):
    """Natural log; with ``floor`` the argument is clamped below at that value."""
    x = a.data
    if floor is not None:
        clipped = np.maximum(x, floor)
        mask = x > floor

        def bw(g):
            return (np.where(mask, g / clipped, 0).astype(x.dtype),)
        return _result("log", np.log(clipped), (a,), bw)
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def relu(a):
    x = a.data
    return _result("relu", np.maximum(x, 0, dtype=x.dtype), (a,),
                   lambda g: (g * (x > 0),))


# reductions and shape ------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    if int(np.prod(shape)) != a.data.size and -1 not in shape:
        raise ShapeError("reshape", a.shape, shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        return g @ b.data.T, a.data.T @ g
    return _result("matmul", a.data @ b.data, (a, b), bw)


def l2_sq_distance(a, b):
    """Row-wise squared Euclidean distance between two N x d matrices."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError("l2_sq_distance", a.shape, b.shape)
    diff = a.data - b.data

    def bw(g):
        ga = 2 * g[:, None] * diff
        return ga, -ga
    return _result("l2_sq_distance", np.sum(diff * diff, axis=1), (a, b), bw)


def pairwise_sq_distance(a, b):
    """Squared distances between every row of ``a`` (N x d) and of ``b`` (K x d)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("pairwise_sq_distance", a.shape, b.shape)
    diff = a.data[:, None, :] - b.data[None, :, :]

    def bw(g):
        weighted = 2 * g[:, :, None] * diff
        return weighted.sum(axis=1), -weighted.sum(axis=0)
    return _result("pairwise_sq_distance", np.sum(diff * diff, axis=2),
                   (a, b), bw)


# layers --------------------------------------------------------------------

def _check_nchw(op, x):
    if x.ndim != 4:
        raise ShapeError(op, x.shape, ("N", "C", "H", "W"))


def _im2col(xp, k, stride, out_h, out_w):
    """(N, C, Hp, Wp) -> (N, C*k*k, out_h*out_w) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, out_h, out_w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * out_h:stride,
                                  j:j + stride * out_w:stride]
    return cols.reshape(n, c * k * k, out_h * out_w)


def _col2im(cols, shape, k, stride, out_h, out_w):
    """Adjoint of :func:`_im2col`: scatter-add patches onto a zero canvas."""
    n, c = shape[:2]
    cols = cols.reshape(n, c, k, k, out_h, out_w)
    canvas = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            canvas[:, :, i:i + stride * out_h:stride,
                   j:j + stride * out_w:stride] += cols[:, :, i, j]
    return canvas


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation of N x C x H x W input; ``kernel`` is (out, in, k, k)."""
    _check_nchw("conv2d", x)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if (kernel.ndim != 4 or kernel.shape[1] != x.shape[1]
            or kernel.shape[2] != kernel.shape[3]):
        raise ShapeError("conv2d", x.shape, kernel.shape)
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    out_h = (hp - k) // stride + 1
    out_w = (wp - k) // stride + 1
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, out_h, out_w)
    wmat = kernel.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, out_h, out_w)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g3 = g.reshape(n, o, out_h * out_w)
        gk = None
        if kernel.requires_grad:
            gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            gxp = _col2im(gcols, xp.shape, k, stride, out_h, out_w)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if bias is None:
            return gx, gk
        return gx, gk, g3.sum(axis=(0, 2))
    return _result("conv2d", out, inputs, bw)


def conv_transpose2d(x, kernel, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution, the adjoint of :func:`conv2d` in its input.

    ``kernel`` is (in, out, k, k).  Output size per axis is
    ``(H - 1) * stride - 2 * padding + k + output_padding``.
    """
    _check_nchw("conv_transpose2d", x)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if (kernel.ndim != 4 or kernel.shape[0] != x.shape[1]
            or kernel.shape[2] != kernel.shape[3]):
        raise ShapeError("conv_transpose2d", x.shape, kernel.shape)
    n, cin, h, w = x.shape
    _, cout, k, _ = kernel.shape
    out_h = (h - 1) * stride - 2 * padding + k + output_padding
    out_w = (w - 1) * stride - 2 * padding + k + output_padding
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv_transpose2d", x.shape, kernel.shape)
    extra = max(0, output_padding - padding)
    full_shape = (n, cout, (h - 1) * stride + k + extra, (w - 1) * stride + k + extra)
    xm = x.data.reshape(n, cin, h * w)
    wmat = kernel.data.reshape(cin, -1)
    cols = np.matmul(wmat.T, xm)
    full = _col2im(cols, full_shape, k, stride, h, w)
    out = full[:, :, padding:padding + out_h, padding:padding + out_w]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gfull = np.zeros(full_shape, dtype=g.dtype)
        gfull[:, :, padding:padding + out_h, padding:padding + out_w] = g
        gcols = _im2col(gfull, k, stride, h, w)
        gx = None
        if x.requires_grad:
            gx = np.matmul(wmat, gcols).reshape(x.shape)
        gk = None
        if kernel.requires_grad:
            gk = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))
    return _result("conv_transpose2d", out, inputs, bw)


def pool_output_size(size, window, stride):
    """Pooled length with zero padding at the far edge (ceil division)."""
    return -(-max(size - window, 0) // stride) + 1


def maxpool2d(x, window=2, stride=2):
    """Max pooling; the far edges are zero padded so no input is dropped.

    Gradient goes to the first maximal element of each window (row-major
    order within the window) on ties.
    """
    _check_nchw("maxpool2d", x)
    if stride < 1 or window < 1:
        raise ValueError("window and stride must be >= 1")
    n, c, h, w = x.shape
    out_h = pool_output_size(h, window, stride)
    out_w = pool_output_size(w, window, stride)
    pad_h = (out_h - 1) * stride + window - h
    pad_w = (out_w - 1) * stride + window - w
    xp = x.data
    if pad_h or pad_w:
        xp = np.pad(xp, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))

    def window_slices():
        for pos in range(window * window):
            i, j = divmod(pos, window)
            yield (slice(None), slice(None), slice(i, i + stride * out_h, stride),
                   slice(j, j + stride * out_w, stride))

    slices = list(window_slices())
    out = xp[slices[0]].copy()
    for sl in slices[1:]:
        np.maximum(out, xp[sl], out=out)

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for sl in slices:
            hit = (xp[sl] == out) & ~taken
            taken |= hit
            gxp[sl] += np.where(hit, g, 0)
        return (gxp[:, :, :h, :w],)
    return _result("maxpool2d", out, (x,), bw)


class RunningStats:
    """Batch-norm running statistics, updated as a side effect of train mode."""

    def __init__(self, features, momentum=0.9, dtype=np.float32):
        self.mean = np.zeros(features, dtype=dtype)
        self.var = np.ones(features, dtype=dtype)
        self.momentum = momentum

    def update(self, batch_mean, batch_var):
        m = self.momentum
        self.mean = (m * self.mean + (1 - m) * batch_mean).astype(self.mean.dtype)
        self.var = (m * self.var + (1 - m) * batch_var).astype(self.var.dtype)


def batch_norm(x, scale, shift, mode="train", stats=None, eps=1e-5):
    """Normalize per channel (4-D input) or per feature (2-D input).

    ``train`` mode uses batch statistics and folds them into ``stats`` when
    given; ``eval`` mode reads ``stats``.
    """
    if x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    elif x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    else:
        raise ShapeError("batch_norm", x.shape, scale.shape)
    feats = x.shape[1]
    if scale.shape != (feats,) or shift.shape != (feats,):
        raise ShapeError("batch_norm", x.shape, scale.shape)
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    xd = x.data
    dtype = xd.dtype
    # statistics in at least double precision
    wide = np.promote_types(dtype, np.float64)
    if mode == "train":
        mu = xd.mean(axis=axes, dtype=wide)
        var = xd.var(axis=axes, dtype=wide)
        if stats is not None:
            stats.update(mu, var)
    else:
        if stats is None:
            raise ValueError("eval mode needs running statistics")
        mu, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(np.asarray(var, dtype=wide) + eps)
    a = (scale.data * inv_std).astype(dtype)
    b = (shift.data - mu * scale.data * inv_std).astype(dtype)
    out = xd * a.reshape(bshape) + b.reshape(bshape)
    count = xd.size // feats
    mu = np.asarray(mu, dtype=dtype).reshape(bshape)
    inv_std = inv_std.astype(dtype).reshape(bshape)

    def bw(g):
        xhat = (xd - mu) * inv_std
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gxhat = g * scale.data.reshape(bshape)
        if mode == "train":
            gx = (inv_std / count) * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv_std
        return gx, gscale, gshift
    return _result("batch_norm", out, (x, scale, shift), bw)
