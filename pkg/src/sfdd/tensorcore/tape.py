"""Tensor value type, the recording tape, and reverse-mode differentiation.

Operations record onto the tape that is active in the current thread
(``with Tape(): ...``) whenever one of their inputs requires grad.  Outside a
tape nothing is recorded and results never require grad.

``backward`` replays the tape from the loss node down to the first record.  With
``retain_graph=True`` the backward pass itself runs on the tape, so the returned
gradients are recorded tensors and can be differentiated again.
"""

import contextlib
import contextvars

import numpy as np

from ..errors import ContractError, InvalidShapeError

_ACTIVE_TAPE = contextvars.ContextVar("sfdd_active_tape", default=None)
_DTYPE = contextvars.ContextVar("sfdd_dtype", default=np.float32)


def current_dtype():
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype):
    """Run a block with a different storage dtype (float32 default, float64 for oracles)."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Record:
    __slots__ = ("op", "inputs", "backward", "index")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.index = -1

    @property
    def input_ids(self):
        return tuple(t.node_id for t in self.inputs)

    def __repr__(self):
        return f"Record({self.index}, {self.op}, inputs={self.input_ids})"


class Tape:
    """Ordered list of primitive applications, confined to one thread."""

    def __init__(self):
        self.records = []
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._tokens.pop())
        return False

    def __len__(self):
        return len(self.records)

    def _append(self, record):
        record.index = len(self.records)
        self.records.append(record)
        return record.index


def active_tape():
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_record():
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


@contextlib.contextmanager
def tape_scope():
    """Reuse the active tape, or open a fresh one for the duration of the block."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        yield tape
    else:
        with Tape() as tape:
            yield tape


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr, op):
    # a native-precision sum is one cheap pass; it can only overflow to a false alarm
    if arr.size and not np.isfinite(np.add.reduce(arr, axis=None)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "node_id", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype != current_dtype():
            arr = arr.astype(current_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self.node_id = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t._tape = None
        t.node_id = None
        return t

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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, other):
        return _ops().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return _ops().transpose(self)


def _ops():
    from . import ops
    return ops


def make(op, inputs, out, backward, checked=True):
    """Wrap ``out`` as the result of primitive ``op`` and record it when needed.

    ``checked=False`` skips the finiteness scan for ops whose output is finite
    whenever their (already checked) inputs are.
    """
    if checked:
        _check_finite(out, op)
    t = Tensor._wrap(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t._tape = tape
        t.node_id = tape._append(Record(op, tuple(inputs), backward))
    return t


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss, wrt, retain_graph=False):
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors unreachable from ``loss`` get a zero gradient.  With
    ``retain_graph=True`` the gradients are themselves recorded on the loss's
    tape and may be differentiated again.
    """
    wrt = list(wrt)
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    for t in wrt:
        if not isinstance(t, Tensor):
            raise ContractError("wrt entries must be Tensors")
    tape = loss._tape
    if tape is None:
        return [Tensor._wrap(np.zeros_like(t.data)) for t in wrt]

    def key(t):
        return t.node_id if t._tape is tape else ("leaf", id(t))

    wanted = {key(t) for t in wrt}
    found = {}
    adj = {loss.node_id: Tensor._wrap(np.ones_like(loss.data))}
    ctx = tape if retain_graph else no_record()
    with ctx:
        for idx in range(loss.node_id, -1, -1):
            g = adj.pop(idx, None)
            if g is None:
                continue
            if idx in wanted:
                found[idx] = g
            rec = tape.records[idx]
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise InvalidShapeError(f"{rec.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                k = key(inp)
                prev = adj.get(k)
                adj[k] = gi if prev is None else _ops().add(prev, gi)
    found.update({k: v for k, v in adj.items() if k in wanted})
    return [found[key(t)] if key(t) in found else Tensor._wrap(np.zeros_like(t.data)) for t in wrt]
