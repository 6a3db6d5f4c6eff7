"""Hot array kernels behind the conv/pool primitives.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels`` is used.  ``SFDD_KERNELS=numpy`` forces
the fallback.  The gather kernels (im2col, pooling) are bit-identical across
backends; the instance-norm reductions agree up to summation order.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "numpy"
_impl = _pykernels
if os.environ.get("SFDD_KERNELS", "auto").lower() != "numpy":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def use_backend(name):
    """Switch kernel backend at runtime ("cython" or "numpy"). Returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "numpy":
        _impl, BACKEND = _pykernels, "numpy"
    elif name == "cython":
        from . import _ckernels
        _impl, BACKEND = _ckernels, "cython"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return prev


def available_backends():
    names = ["numpy"]
    try:
        from . import _ckernels  # noqa: F401
        names.append("cython")
    except ImportError:
        pass
    return names


def im2col3x3(x):
    return _impl.im2col3x3(np.ascontiguousarray(x))


def conv2d(x, w, cols=None):
    """3x3 cross-correlation, stride 1, zero padding 1. x: (N,C,H,W), w: (O,C,3,3).

    ``cols`` may carry a precomputed ``im2col3x3(x)``.
    """
    n, _, h, wd = x.shape
    o = w.shape[0]
    if cols is None:
        cols = im2col3x3(x)
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(n, o, h, wd)


def conv2d_input_grad(g, w):
    """Adjoint of ``conv2d`` in its input: g (N,O,H,W), w (O,C,3,3) -> (N,C,H,W)."""
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d(g, wf)


def conv2d_weight_grad(x, g, cols=None):
    """Adjoint of ``conv2d`` in its kernel: x (N,C,H,W), g (N,O,H,W) -> (O,C,3,3)."""
    n, c = x.shape[:2]
    o = g.shape[1]
    if cols is None:
        cols = im2col3x3(x)
    per_sample = np.matmul(g.reshape(n, o, -1), cols.transpose(0, 2, 1))
    return np.asarray(per_sample.sum(axis=0, dtype=np.float64), dtype=x.dtype).reshape(o, c, 3, 3)


def avgpool2x2(x):
    return _impl.avgpool2x2(x)


def avgpool2x2_adjoint(g, h, w):
    return _impl.avgpool2x2_adjoint(np.ascontiguousarray(g), h, w)


def instance_norm_fwd(x, eps):
    return _impl.instance_norm_fwd(np.ascontiguousarray(x), float(eps))


def instance_norm_bwd(g, y, inv):
    return _impl.instance_norm_bwd(np.ascontiguousarray(g), np.ascontiguousarray(y), np.ascontiguousarray(inv))
