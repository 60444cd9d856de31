"""numpy tensors with a reverse-mode differentiation tape.

The ops here are exactly what the inpainting networks and losses need: 4x4
stride-2 (de)convolutions, instance normalization, pointwise activations,
channel concatenation and a few reductions. Every op links its output back
to its inputs; ``backward`` walks that implicit tape once in reverse
topological order. Values consumed by several ops (skip connections, shift
taps) sum the gradients arriving from each consumer.

Arithmetic stays in the dtype of the inputs: float64 for tests and gradient
checks, float32 for faster training. With a fixed graph the walk order is
fixed, so repeated forward+backward passes are bit-identical.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf (error state, not a value)."""


_grad_enabled = True
_finite_checks = True


@contextmanager
def no_grad():
    """Run a block without recording tape nodes (target branches, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled):
    """Toggle per-op NaN/Inf validation; returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def _check_finite(arr, op):
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in output of {op}")


def _as_float_array(data):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense N-d array plus the tape node that produced it."""

    def __init__(self, data, requires_grad=False):
        self.data = _as_float_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """Leaf tensor sharing this value, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, grad={self.requires_grad})"


def constant(data):
    return Tensor(data, requires_grad=False)


def _make(data, parents, grad_fn, op):
    """Wrap an op result, recording the node only when a parent needs it."""
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
        out._op = op
    return out


def _recording(*parents):
    return _grad_enabled and any(p.requires_grad for p in parents)


def backward(loss):
    """Accumulate d(loss)/d(node) into .grad over the whole tape.

    The loss must be scalar. Gradients sum at fan-out points, so a value
    feeding both a skip concatenation and a shift layer receives the sum of
    both paths.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires gradients")

    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._grad_fn is None or node.grad is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _require_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(x, y):
    _require_same_shape(x, y, "add")
    return _make(x.data + y.data, (x, y), lambda g: (g, g), "add")


def sub(x, y):
    _require_same_shape(x, y, "sub")
    return _make(x.data - y.data, (x, y), lambda g: (g, -g), "sub")


def mul(x, y):
    _require_same_shape(x, y, "mul")
    xd, yd = x.data, y.data
    return _make(xd * yd, (x, y), lambda g: (g * yd, g * xd), "mul")


def neg(x):
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c):
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x, c):
    c = float(c)
    return _make(x.data + c, (x,), lambda g: (g,), "add_scalar")


def one_minus(x):
    return _make(1.0 - x.data, (x,), lambda g: (-g,), "one_minus")


def mask_mul(x, mask):
    """Multiply by a constant array broadcastable over x (0/1 masks)."""
    mask = np.asarray(mask, dtype=x.data.dtype)
    out = x.data * mask
    if out.shape != x.data.shape:
        raise ValueError(f"mask_mul: mask {mask.shape} does not broadcast onto {x.data.shape}")
    return _make(out, (x,), lambda g: (g * mask,), "mask_mul")


def absolute(x):
    xd = x.data
    return _make(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def log(x):
    xd = x.data
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,), "log")


def clamp_min(x, lo):
    lo = float(lo)
    xd = x.data
    keep = xd > lo
    return _make(np.maximum(xd, lo), (x,), lambda g: (g * keep,), "clamp_min")


def sum_all(x):
    xd = x.data
    out = np.asarray(xd.sum(), dtype=xd.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, xd.shape).astype(xd.dtype, copy=True),), "sum")


def mean_all(x):
    xd = x.data
    n = xd.size
    out = np.asarray(xd.mean(), dtype=xd.dtype)
    return _make(out, (x,), lambda g: ((np.broadcast_to(g, xd.shape) / n).astype(xd.dtype, copy=True),), "mean")


# ---------------------------------------------------------------------------
# activations


def relu(x):
    xd = x.data
    keep = xd > 0
    return _make(np.where(keep, xd, 0.0).astype(xd.dtype), (x,), lambda g: (g * keep,), "relu")


def leaky_relu(x, slope=0.2):
    xd = x.data
    factor = np.where(xd > 0, 1.0, slope).astype(xd.dtype)
    return _make(xd * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def tanh(x):
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x):
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(parts):
    """Concatenate NCHW tensors along the channel axis, order preserved."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels: empty input list")
    ref = parts[0].data.shape
    for p in parts:
        s = p.data.shape
        if len(s) != 4 or s[0] != ref[0] or s[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref} vs {s}")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _make(out, tuple(parts), grad_fn, "concat")


# ---------------------------------------------------------------------------
# convolution machinery (im2col / col2im)


def _pad2d(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp, kh, kw, stride, oh, ow):
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, oh * ow)  # reshape copies (non-contiguous view)


def _col2im(cols, n, c, hp, wp, kh, kw, stride, oh, ow):
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    return xp


def _conv_forward(xd, wd, stride, pad):
    n, c, h, w = xd.shape
    o, ci, kh, kw = wd.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit padded input {h}x{w} (pad={pad})")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    cols = _im2col(_pad2d(xd, pad), kh, kw, stride, oh, ow)
    w2 = wd.reshape(o, c * kh * kw)
    out = np.matmul(w2, cols).reshape(n, o, oh, ow)
    return out, cols, (oh, ow)


def _conv_input_grad(g, wd, in_shape, stride, pad):
    """Adjoint of _conv_forward with respect to its input."""
    n, c, h, w = in_shape
    o, _, kh, kw = wd.shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    w2 = wd.reshape(o, c * kh * kw)
    gmat = g.reshape(n, o, oh * ow)
    gcols = np.matmul(w2.T, gmat)
    gp = _col2im(gcols, n, c, h + 2 * pad, w + 2 * pad, kh, kw, stride, oh, ow)
    if pad:
        return gp[:, :, pad:-pad, pad:-pad]
    return gp


def _conv_weight_grad(cols, g, wshape):
    o, c, kh, kw = wshape
    n = g.shape[0]
    gmat = g.reshape(n, o, -1)
    gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(o, c, kh, kw)


def conv2d(x, w, stride=1, pad=0, bias=None):
    """Cross-correlation of NCHW input with OIKK kernels, zero padding."""
    xd, wd = x.data, w.data
    out, cols, _ = _conv_forward(xd, wd, stride, pad)
    parents = (x, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents = (x, w, bias)
    if not _recording(*parents):
        return _make(out, (), None, "conv2d")

    need_x = x.requires_grad
    in_shape = xd.shape
    wshape = wd.shape
    wd_saved = wd

    def grad_fn(g):
        gx = _conv_input_grad(g, wd_saved, in_shape, stride, pad) if need_x else None
        gw = _conv_weight_grad(cols, g, wshape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, grad_fn, "conv2d")


def conv2d_transpose(x, w, stride=1, pad=0, bias=None):
    """Exact adjoint of conv2d with the same kernel and geometry.

    The kernel keeps the conv2d layout (O, I, K, K): an O-channel input is
    mapped to an I-channel output of spatial size (H-1)*stride - 2*pad + K.
    """
    xd, wd = x.data, w.data
    n, o, h, w_in = xd.shape
    ko, i, kh, kw = wd.shape
    if ko != o:
        raise ValueError(f"conv2d_transpose: input has {o} channels, kernel expects {ko}")
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (w_in - 1) * stride - 2 * pad + kw
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d_transpose: output size {oh}x{ow} is empty")
    out = _conv_input_grad(xd, wd, (n, i, oh, ow), stride, pad)
    parents = (x, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents = (x, w, bias)
    if not _recording(*parents):
        return _make(out, (), None, "conv2d_transpose")

    need_x = x.requires_grad
    xd_saved = xd
    wd_saved = wd
    wshape = wd.shape

    def grad_fn(g):
        # g has the output (I-channel) shape; running the forward conv on it
        # gives the input gradient, and its im2col patches give the kernel
        # gradient weighted by the saved input.
        gx_full, gcols, _ = _conv_forward(g, wd_saved, stride, pad)
        gx = gx_full if need_x else None
        gw = _conv_weight_grad(gcols, xd_saved, wshape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, grad_fn, "conv2d_transpose")


def instance_norm(x, eps=1e-5):
    """Standardize each (sample, channel) plane to zero mean, unit variance."""
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"instance_norm expects NCHW input, got shape {xd.shape}")
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    s = np.sqrt(var + eps)
    y = (xd - mu) / s

    def grad_fn(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gym = (g * y).mean(axis=(2, 3), keepdims=True)
        return ((g - gm - y * gym) / s,)

    return _make(y, (x,), grad_fn, "instance_norm")


# ---------------------------------------------------------------------------
# parameters and the optimizer


class Parameter:
    """Trainable value plus its adaptive-moment optimizer state."""

    def __init__(self, value, name=""):
        self.t = Tensor(value, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.t.data)
        self.v = np.zeros_like(self.t.data)
        self.steps = 0

    @property
    def data(self):
        return self.t.data

    @data.setter
    def data(self, value):
        self.t.data = value

    @property
    def grad(self):
        return self.t.grad

    def zero_grad(self):
        self.t.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.t.data.shape})"


def adam_step(params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
    """One bias-corrected adaptive moment update over the given parameters.

    Parameters with no accumulated gradient are skipped. New arrays are
    bound rather than mutated in place so tape nodes recorded before the
    step keep their saved forward values.
    """
    for p in params:
        g = p.t.grad
        if g is None:
            continue
        p.steps += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        mhat = p.m / (1.0 - beta1 ** p.steps)
        vhat = p.v / (1.0 - beta2 ** p.steps)
        p.t.data = p.t.data - lr * mhat / (np.sqrt(vhat) + eps)
