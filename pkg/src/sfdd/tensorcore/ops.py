"""Differentiable primitives.

Every backward rule is written with these same primitives, so gradients taken
with ``retain_graph=True`` can be differentiated again.  Reductions accumulate
in float64 and store in the active precision.

Shape rules: elementwise binary ops broadcast numpy-style; ``matmul`` and
``transpose`` are 2-D only; ``conv2d`` is a 3x3 cross-correlation with stride 1
and zero padding 1 on NCHW input; ``avgpool2x2`` drops a trailing odd row/column.
"""

import numpy as np

from ..errors import InvalidShapeError
from . import kernels
from .tape import Tensor, active_tape, as_tensor, make

LOG_FLOOR = 1e-12
NORM_EPS = 1e-5


def _const(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


def _acc_sum(a, axis=None, keepdims=False):
    return np.asarray(a.sum(axis=axis, dtype=np.float64, keepdims=keepdims), dtype=a.dtype)


def _need(t, fn, *args):
    """Evaluate a gradient term only for inputs that require grad."""
    return fn(*args) if t.requires_grad else None


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- shape plumbing

def sum_to(x, shape):
    """Sum a broadcast result back down to ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise InvalidShapeError(f"sum_to: cannot reduce {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1
    )
    out = _acc_sum(x.data, axis=axes, keepdims=True).reshape(shape)
    src = x.shape
    return make("sum_to", (x,), out, lambda g: (broadcast_to(g, src),))


def broadcast_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError:
        raise InvalidShapeError(f"broadcast_to: {x.shape} -> {shape}") from None
    src = x.shape
    return make("broadcast_to", (x,), out, lambda g: (sum_to(g, src),), checked=False)


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise InvalidShapeError(f"reshape: {x.shape} -> {shape}") from None
    src = x.shape
    return make("reshape", (x,), out, lambda g: (reshape(g, src),), checked=False)


def transpose(x):
    if x.ndim != 2:
        raise InvalidShapeError(f"transpose expects 2-D, got {x.shape}")
    return make("transpose", (x,), np.ascontiguousarray(x.data.T), lambda g: (transpose(g),), checked=False)


def pad2d(x, height, width, top, left):
    """Embed the trailing (h, w) plane of ``x`` into a zero (height, width) plane at (top, left)."""
    h, w = x.shape[-2:]
    if top < 0 or left < 0 or top + h > height or left + w > width:
        raise InvalidShapeError(f"pad2d: {h}x{w} at ({top},{left}) exceeds {height}x{width}")
    out = np.zeros(x.shape[:-2] + (height, width), dtype=x.dtype)
    out[..., top:top + h, left:left + w] = x.data
    return make("pad2d", (x,), out, lambda g: (crop2d(g, top, left, h, w),), checked=False)


def crop2d(x, top, left, h, w):
    height, width = x.shape[-2:]
    if top < 0 or left < 0 or top + h > height or left + w > width:
        raise InvalidShapeError(f"crop2d: {h}x{w} at ({top},{left}) exceeds {height}x{width}")
    out = np.ascontiguousarray(x.data[..., top:top + h, left:left + w])
    return make("crop2d", (x,), out, lambda g: (pad2d(g, height, width, top, left),), checked=False)


def take_rows(x, start, count):
    """Rows [start, start + count) along the leading axis."""
    n = x.shape[0]
    if start < 0 or count < 1 or start + count > n:
        raise InvalidShapeError(f"take_rows: [{start}, {start + count}) outside {n} rows")
    out = np.ascontiguousarray(x.data[start:start + count])
    return make("take_rows", (x,), out, lambda g: (put_rows(g, start, n),), checked=False)


def put_rows(x, start, n):
    """Embed ``x`` as rows [start, start + len(x)) of a zero tensor with ``n`` rows."""
    count = x.shape[0]
    if start < 0 or start + count > n:
        raise InvalidShapeError(f"put_rows: {count} rows at {start} exceed {n}")
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    out[start:start + count] = x.data
    return make("put_rows", (x,), out, lambda g: (take_rows(g, start, count),), checked=False)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("add needs at least one Tensor")
    if not isinstance(b, Tensor):
        return add_scalar(a, b) if np.ndim(b) == 0 else add(a, _const(b, a))
    if not isinstance(a, Tensor):
        return add_scalar(b, a) if np.ndim(a) == 0 else add(_const(a, b), b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make("add", (a, b), a.data + b.data,
                lambda g: (_need(a, sum_to, g, sa), _need(b, sum_to, g, sb)))


def add_scalar(a, s):
    s = a.dtype.type(s)
    return make("add_scalar", (a,), a.data + s, lambda g: (g,))


def neg(a):
    return make("neg", (a,), -a.data, lambda g: (neg(g),), checked=False)


def sub(a, b):
    if not isinstance(a, Tensor):
        if np.ndim(a) == 0:
            return add_scalar(neg(b), a)
        a = _const(a, b)
    if not isinstance(b, Tensor):
        if np.ndim(b) == 0:
            return add_scalar(a, -b)
        b = _const(b, a)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make("sub", (a, b), a.data - b.data,
                lambda g: (_need(a, sum_to, g, sa), _need(b, lambda u, s: sum_to(neg(u), s), g, sb)))


def mul(a, b):
    if not isinstance(b, Tensor):
        if np.ndim(b) == 0:
            return mul_scalar(a, b)
        b = _const(b, a)
    if not isinstance(a, Tensor):
        if np.ndim(a) == 0:
            return mul_scalar(b, a)
        a = _const(a, b)
    _broadcast_shape(a, b, "mul")
    sa, sb = a.shape, b.shape
    return make("mul", (a, b), a.data * b.data,
                lambda g: (_need(a, lambda: sum_to(mul(g, b), sa)), _need(b, lambda: sum_to(mul(g, a), sb))))


def mul_scalar(a, s):
    s = float(s)
    return make("mul_scalar", (a,), a.data * a.dtype.type(s), lambda g: (mul_scalar(g, s),))


def div(a, b):
    if not isinstance(b, Tensor):
        if np.ndim(b) == 0:
            return mul_scalar(a, 1.0 / float(b))
        b = _const(b, a)
    if not isinstance(a, Tensor):
        a = _const(a, b)
    _broadcast_shape(a, b, "div")
    sa, sb = a.shape, b.shape
    out = make("div", (a, b), a.data / b.data, None)

    def bw(g):
        return (_need(a, lambda: sum_to(div(g, b), sa)),
                _need(b, lambda: sum_to(neg(div(mul(g, out), b)), sb)))

    _set_backward(out, bw)
    return out


def _set_backward(t, fn):
    if t._tape is not None:
        t._tape.records[t.node_id].backward = fn


def exp(a):
    out = make("exp", (a,), np.exp(a.data), None)
    _set_backward(out, lambda g: (mul(g, out),))
    return out


def log(a):
    """Natural log with the argument floored at ``LOG_FLOOR``."""
    out = np.log(np.maximum(a.data, a.dtype.type(LOG_FLOOR)))
    return make("log", (a,), out, lambda g: (div(g, clamp(a, LOG_FLOOR, None)),))


def sqrt(a):
    out = make("sqrt", (a,), np.sqrt(a.data), None)
    _set_backward(out, lambda g: (mul_scalar(div(g, clamp(out, LOG_FLOOR, None)), 0.5),))
    return out


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; the gradient passes where lo <= a <= hi."""
    out = a.data
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
        out = np.maximum(out, a.dtype.type(lo))
    if hi is not None:
        mask &= a.data <= hi
        out = np.minimum(out, a.dtype.type(hi))
    m = Tensor._wrap(mask.astype(a.dtype))
    return make("clamp", (a,), np.array(out, copy=True), lambda g: (mul(g, m),), checked=False)


def sigmoid(a):
    e = np.exp(-np.abs(a.data))
    one = a.dtype.type(1)
    val = np.where(a.data >= 0, one / (one + e), e / (one + e)).astype(a.dtype)
    out = make("sigmoid", (a,), val, None, checked=False)
    _set_backward(out, lambda g: (mul(g, mul(out, add_scalar(neg(out), 1.0))),))
    return out


def relu(a):
    """max(a, 0); derivative at exactly 0 is 0."""
    out = make("relu", (a,), np.maximum(a.data, a.dtype.type(0)), None, checked=False)

    def bw(g):
        mask = Tensor._wrap((a.data > 0).astype(a.dtype))
        return (mul(g, mask),)

    _set_backward(out, bw)
    return out


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = _acc_sum(a.data, axis=axes, keepdims=keepdims)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))
    return make("sum", (a,), out, lambda g: (broadcast_to(reshape(g, kept), src),))


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul_scalar(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def dot(a, b):
    """Inner product of two same-shape tensors."""
    if a.shape != b.shape:
        raise InvalidShapeError(f"dot: {a.shape} vs {b.shape}")
    return sum(mul(a, b))


def l2_norm(a, axis=None, keepdims=False):
    return sqrt(sum(mul(a, a), axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul: {a.shape} @ {b.shape}")
    return make("matmul", (a, b), a.data @ b.data,
                lambda g: (_need(a, lambda: matmul(g, transpose(b))), _need(b, lambda: matmul(transpose(a), g))))


def _check_conv(x, w):
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise InvalidShapeError(f"conv2d: input {x.shape} with kernel {w.shape}")


def conv2d(x, w):
    """3x3 cross-correlation, stride 1, pad 1: (N,C,H,W) x (O,C,3,3) -> (N,O,H,W)."""
    _check_conv(x, w)
    cols = kernels.im2col3x3(x.data) if w.requires_grad and active_tape() is not None else None
    return make("conv2d", (x, w), kernels.conv2d(x.data, w.data, cols),
                lambda g: (_need(x, conv2d_input_grad, g, w), _need(w, conv2d_weight_grad, x, g, cols)))


def conv2d_input_grad(g, w):
    if g.ndim != 4 or w.ndim != 4 or g.shape[1] != w.shape[0]:
        raise InvalidShapeError(f"conv2d_input_grad: {g.shape} with kernel {w.shape}")
    return make("conv2d_input_grad", (g, w), kernels.conv2d_input_grad(g.data, w.data),
                lambda u: (_need(g, conv2d, u, w), _need(w, conv2d_weight_grad, u, g)))


def conv2d_weight_grad(x, g, cols=None):
    if x.ndim != 4 or g.ndim != 4 or x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
        raise InvalidShapeError(f"conv2d_weight_grad: {x.shape} with {g.shape}")
    return make("conv2d_weight_grad", (x, g), kernels.conv2d_weight_grad(x.data, g.data, cols),
                lambda u: (_need(x, conv2d_input_grad, g, u), _need(g, conv2d, x, u)))


def avgpool2x2(x):
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise InvalidShapeError(f"avgpool2x2: {x.shape}")
    h, w = x.shape[2:]
    return make("avgpool2x2", (x,), kernels.avgpool2x2(x.data),
                lambda g: (avgpool2x2_adjoint(g, h, w),))


def avgpool2x2_adjoint(g, h, w):
    return make("avgpool2x2_adjoint", (g,), kernels.avgpool2x2_adjoint(g.data, h, w),
                lambda u: (avgpool2x2(u),))


def instance_norm(x, eps=NORM_EPS):
    """Per-sample, per-channel normalisation over (H, W); no affine parameters.

    Recorded as one node.  The backward rule is the closed form
    dx = (g - mean(g) - y * mean(g * y)) / sigma.  When it runs on a tape it is
    rebuilt from primitives on ``x`` so it can be differentiated again.
    """
    if x.ndim != 4:
        raise InvalidShapeError(f"instance_norm expects NCHW, got {x.shape}")
    y, inv = kernels.instance_norm_fwd(x.data, eps)
    out = make("instance_norm", (x,), y, None, checked=False)

    def bw(g):
        if active_tape() is None:
            return (Tensor._wrap(kernels.instance_norm_bwd(g.data, out.data, inv)),)
        xc_t = sub(x, mean(x, axis=(2, 3), keepdims=True))
        sigma = sqrt(add_scalar(mean(mul(xc_t, xc_t), axis=(2, 3), keepdims=True), eps))
        y = div(xc_t, sigma)
        inner = sub(sub(g, mean(g, axis=(2, 3), keepdims=True)),
                    mul(y, mean(mul(g, y), axis=(2, 3), keepdims=True)))
        return (div(inner, sigma),)

    _set_backward(out, bw)
    return out


# ---------------------------------------------------------------- dispatcher

_OPS = {
    "add": add, "sub": sub, "mul": mul, "mul_scalar": mul_scalar, "div": div, "neg": neg,
    "matmul": matmul, "conv2d": conv2d, "sigmoid": sigmoid, "relu": relu,
    "instance_norm": instance_norm, "avgpool2x2": avgpool2x2, "reshape": reshape,
    "sum": sum, "mean": mean, "l2_norm": l2_norm, "dot": dot, "exp": exp, "log": log,
    "sqrt": sqrt, "clamp": clamp, "transpose": transpose, "pad2d": pad2d, "crop2d": crop2d,
    "take_rows": take_rows, "put_rows": put_rows,
}


def apply(op_kind, *inputs, **kwargs):
    """Apply primitive ``op_kind`` by name, e.g. ``apply("conv2d", x, w)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*[as_tensor(t) if isinstance(t, (np.ndarray, list)) else t for t in inputs], **kwargs)
