"""Dense tensors with a tape-based reverse-mode differentiator (arbitrary order)."""

import numpy as np

from .. import rng as _rng
from ..errors import InvalidShapeError
from . import kernels, ops
from .ops import apply
from .tape import (
    NonFiniteError,
    Record,
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    backward,
    current_dtype,
    no_record,
    precision,
    tape_scope,
)

__all__ = [
    "Tensor", "Tape", "Record", "NonFiniteError", "apply", "backward", "create", "finite_diff",
    "ops", "kernels", "precision", "current_dtype", "no_record", "tape_scope", "active_tape",
    "as_tensor",
]


def create(shape, init="zeros", *, value=0.0, mean=0.0, std=1.0, seed=0, requires_grad=False):
    """New tensor of ``shape``; ``init`` is "zeros", "constant" (uses ``value``) or "gaussian".

    Gaussian draws come from ``rng.stream(seed, "create")``.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise InvalidShapeError(f"invalid shape {shape}")
    dtype = current_dtype()
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif init == "gaussian":
        if std < 0:
            raise ValueError("std must be >= 0")
        data = (mean + std * _rng.stream(seed, "create").standard_normal(shape)).astype(dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def finite_diff(f, x, h=1e-3):
    """Central-difference gradient of scalar ``f`` at ``x`` (Tensor or array).

    ``f`` receives a Tensor and returns a scalar Tensor or float.  Evaluation
    always runs in float64 and the estimate is returned as float64.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)

    def value(arr):
        with no_record(), precision(np.float64):
            out = f(Tensor(arr.reshape(base.shape)))
        return float(out.item() if isinstance(out, Tensor) else out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value(flat)
        flat[i] = orig - h
        fm = value(flat)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor._wrap(grad.reshape(base.shape))
