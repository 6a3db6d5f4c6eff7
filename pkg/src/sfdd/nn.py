"""ConvNet/MLP model family: parameters, forward pass, cross-entropy, SGD training."""

from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .errors import InvalidInputError, InvalidLabelError, InvalidShapeError, InvalidSpecError
from .tensorcore import Tape, Tensor, backward, current_dtype, no_record, ops, tape_scope


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the conv net: ``net_depth`` blocks of conv3x3 -> norm -> act -> pool,
    then one linear head. ``net_depth=0`` gives a linear model on the flattened input."""

    input_shape: tuple = (1, 28, 28)
    n_c: int = 10
    net_width: int = 32
    net_depth: int = 2
    net_act: str = "relu"
    net_norm: str = "instance"
    net_pooling: str = "avg"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise InvalidSpecError(f"input_shape must be (C,H,W), got {self.input_shape}")
        if self.net_depth < 0 or self.net_width < 1 or self.n_c < 2:
            raise InvalidSpecError("need net_depth >= 0, net_width >= 1, n_c >= 2")
        if self.net_act not in ("relu", "sigmoid"):
            raise InvalidSpecError(f"net_act must be relu|sigmoid, got {self.net_act!r}")
        if self.net_norm not in ("instance", "none"):
            raise InvalidSpecError(f"net_norm must be instance|none, got {self.net_norm!r}")
        if self.net_pooling not in ("avg", "none"):
            raise InvalidSpecError(f"net_pooling must be avg|none, got {self.net_pooling!r}")
        self.feature_shape()

    def feature_shape(self):
        c, h, w = self.input_shape
        for _ in range(self.net_depth):
            c = self.net_width
            if self.net_pooling == "avg":
                if h < 2 or w < 2:
                    raise InvalidSpecError("pooling collapses the spatial size below 1")
                h, w = h // 2, w // 2
        return c, h, w

    def layers(self):
        """Layer names in forward order, e.g. ['conv0', 'instance_norm', 'relu', 'avgpool', ..., 'linear']."""
        names = []
        for i in range(self.net_depth):
            names.append(f"conv{i}")
            if self.net_norm == "instance":
                names.append("instance_norm")
            names.append(self.net_act)
            if self.net_pooling == "avg":
                names.append("avgpool")
        names.append("linear")
        return names

    def param_shapes(self):
        shapes = []
        cin = self.input_shape[0]
        for i in range(self.net_depth):
            shapes.append((f"conv{i}.weight", (self.net_width, cin, 3, 3)))
            shapes.append((f"conv{i}.bias", (self.net_width,)))
            cin = self.net_width
        feat = int(np.prod(self.feature_shape()))
        shapes.append(("head.weight", (self.n_c, feat)))
        shapes.append(("head.bias", (self.n_c,)))
        return shapes


@dataclass
class ModelParams:
    names: list
    tensors: list
    init_seed: int = 0
    spec: ModelSpec = None

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def __getitem__(self, name):
        return self.tensors[self.names.index(name)]

    def arrays(self):
        return [t.data for t in self.tensors]

    def replace(self, arrays):
        """New params with the same names and fresh leaf tensors holding ``arrays``."""
        return ModelParams(list(self.names), [Tensor(a, requires_grad=True) for a in arrays],
                           self.init_seed, self.spec)

    def copy(self):
        return self.replace([a.copy() for a in self.arrays()])

    def equals(self, other):
        return self.names == other.names and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass(frozen=True)
class TrainerConfig:
    lr_net: float = 0.01
    batch_size: int = 256
    steps: int = 100

    def __post_init__(self):
        if self.lr_net < 0 or self.batch_size < 1 or self.steps < 0:
            raise InvalidSpecError("TrainerConfig needs lr_net >= 0, batch_size >= 1, steps >= 0")


def build_model(spec, seed, zero=False):
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases, keyed by ``seed``."""
    gen = _rng.stream(seed, "build_model")
    tensors = []
    names = []
    for name, shape in spec.param_shapes():
        if zero or name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arr = gen.uniform(-bound, bound, size=shape)
        names.append(name)
        tensors.append(Tensor(arr.astype(current_dtype()), requires_grad=True))
    return ModelParams(names, tensors, seed, spec)


def _as_batch(batch):
    return batch if isinstance(batch, Tensor) else Tensor(batch)


def forward(params, spec, batch):
    """Logits (n, n_c) for a batch (n, C, H, W)."""
    x = _as_batch(batch)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise InvalidShapeError(f"batch shape {x.shape} does not match input {spec.input_shape}")
    t = params.tensors
    for i in range(spec.net_depth):
        w, b = t[2 * i], t[2 * i + 1]
        x = ops.conv2d(x, w)
        if spec.net_norm == "instance":
            # a per-channel bias cancels exactly under instance norm, so it is not added
            x = ops.instance_norm(x)
        else:
            x = ops.add(x, ops.reshape(b, (1, -1, 1, 1)))
        x = ops.relu(x) if spec.net_act == "relu" else ops.sigmoid(x)
        if spec.net_pooling == "avg":
            x = ops.avgpool2x2(x)
    x = ops.reshape(x, (x.shape[0], -1))
    hw, hb = t[-2], t[-1]
    return ops.add(ops.matmul(x, ops.transpose(hw)), hb)


def label_matrix(labels, n, n_c):
    """Hard class ids -> one-hot rows; soft rows are validated and passed through."""
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if lab.ndim == 1:
        if lab.shape[0] != n:
            raise InvalidLabelError(f"{lab.shape[0]} labels for {n} rows")
        ids = lab.astype(np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= n_c):
            raise InvalidLabelError(f"label out of range [0, {n_c})")
        out = np.zeros((n, n_c), dtype=current_dtype())
        out[np.arange(n), ids] = 1
        return out
    if lab.shape != (n, n_c):
        raise InvalidLabelError(f"soft labels must be ({n}, {n_c}), got {lab.shape}")
    if np.any(lab < 0) or np.any(np.abs(lab.sum(axis=1, dtype=np.float64) - 1.0) > 1e-6):
        raise InvalidLabelError("soft label rows must be non-negative and sum to 1")
    return np.asarray(lab, dtype=current_dtype())


def log_softmax(logits):
    shift = Tensor._wrap(logits.data.max(axis=1, keepdims=True))
    z = ops.sub(logits, shift)
    return ops.sub(z, ops.log(ops.sum(ops.exp(z), axis=1, keepdims=True)))


def cross_entropy(logits, labels):
    """Mean over rows of -sum_j p_j log softmax(logits)_j; hard ids are one-hot rows."""
    n, n_c = logits.shape
    p = Tensor._wrap(label_matrix(labels, n, n_c))
    return ops.mul_scalar(ops.sum(ops.mul(p, log_softmax(logits))), -1.0 / n)


def grad_params(params, spec, batch, labels, retain_graph=False):
    """Parameter gradients of the batch CE loss, in parameter order."""
    with tape_scope():
        loss = cross_entropy(forward(params, spec, batch), labels)
        return backward(loss, params.tensors, retain_graph=retain_graph)


def predict(params, spec, images, batch_size=500):
    """Logits as a numpy array, computed without recording."""
    out = []
    with no_record():
        for i in range(0, len(images), batch_size):
            out.append(forward(params, spec, Tensor(images[i:i + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, spec.n_c), dtype=current_dtype())


def mean_loss(params, spec, images, labels, batch_size=500):
    logits = predict(params, spec, images, batch_size)
    with no_record():
        return float(cross_entropy(Tensor(logits), labels).item())


def training_arrays(data):
    """(images, labels) from a LabeledDataset, SyntheticDataset, or (images, labels) pair."""
    if hasattr(data, "training_arrays"):
        return data.training_arrays()
    images, labels = data
    return np.asarray(images), np.asarray(labels)


def train(params, data, cfg, seed):
    """``cfg.steps`` of minibatch SGD; each step draws ``batch_size`` rows without replacement.

    Returns new params; the input params are left untouched.
    """
    if params.spec is None:
        raise InvalidSpecError("params carry no ModelSpec; build them with build_model")
    images, labels = training_arrays(data)
    if len(images) == 0:
        raise InvalidInputError("cannot train on empty data")
    if cfg.steps == 0 or cfg.lr_net == 0:
        return params.copy()
    gen = _rng.stream(seed, "train")
    arrays = [a.copy() for a in params.arrays()]
    m = len(images)
    b = min(cfg.batch_size, m)
    for _ in range(cfg.steps):
        idx = gen.choice(m, size=b, replace=False) if b < m else np.arange(m)
        cur = params.replace(arrays)
        with Tape():
            grads = grad_params(cur, params.spec, images[idx], labels[idx])
        for a, g in zip(arrays, grads):
            a -= a.dtype.type(cfg.lr_net) * g.data
    return params.replace(arrays)

