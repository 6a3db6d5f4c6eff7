"""Gradient-matching distillation: the matching loss, one local round, the centralized loop."""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import rng as _rng
from .privacy import NoDefense
from .errors import ContractError, EmptyClassError, InvalidInputError, InvalidSpecError
from .tensorcore import Tape, Tensor, backward, ops

DEN_FLOOR = 1e-8


@dataclass(frozen=True)
class SyntheticDataset:
    """n_c blocks of ``ipc`` images; block c carries label c.

    ``images`` is stored class-major as one (n_c * ipc, C, H, W) float32 array
    and is read-only.
    """

    images: np.ndarray
    n_c: int
    ipc: int

    def __post_init__(self):
        arr = np.array(self.images, dtype=np.float32, copy=True)
        if arr.ndim != 4 or len(arr) != self.n_c * self.ipc or self.ipc < 1:
            raise InvalidInputError(f"need {self.n_c}x{self.ipc} images, got array {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("synthetic pixels must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "images", arr)

    @property
    def labels(self):
        return np.repeat(np.arange(self.n_c, dtype=np.int64), self.ipc)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def block(self, c):
        return self.images[c * self.ipc:(c + 1) * self.ipc]

    @property
    def blocks(self):
        return [self.block(c) for c in range(self.n_c)]

    def with_images(self, images):
        return SyntheticDataset(images, self.n_c, self.ipc)

    def training_arrays(self):
        return self.images, self.labels

    def equals(self, other):
        return (self.n_c, self.ipc) == (other.n_c, other.ipc) and np.array_equal(self.images, other.images)


@dataclass(frozen=True)
class DistillConfig:
    lr_img: float = 0.1
    img_steps: int = 1
    model_train: nn.TrainerConfig = field(default_factory=lambda: nn.TrainerConfig(0.01, 256, 10))
    reinit_interval: int = 10
    real_batch: int = 64

    def __post_init__(self):
        if self.lr_img < 0 or self.img_steps < 1 or self.reinit_interval < 1 or self.real_batch < 1:
            raise InvalidSpecError("DistillConfig needs lr_img >= 0, img_steps, reinit_interval, real_batch >= 1")


def _rows(t):
    return ops.reshape(t, (t.shape[0], -1)) if t.ndim != 1 else ops.reshape(t, (t.shape[0], 1))


def matching_loss(ga, gb):
    """Sum over tensors and rows of 1 - cos(a_row, b_row); norms product floored at 1e-8."""
    ga, gb = list(ga), list(gb)
    if len(ga) != len(gb) or any(a.shape != b.shape for a, b in zip(ga, gb)):
        raise ContractError("gradient sets are not aligned")
    total = None
    for a, b in zip(ga, gb):
        a2, b2 = _rows(a), _rows(b)
        num = ops.sum(ops.mul(a2, b2), axis=1)
        den = ops.mul(ops.l2_norm(a2, axis=1), ops.l2_norm(b2, axis=1))
        cos = ops.div(num, ops.clamp(den, DEN_FLOOR, None))
        term = ops.sum(ops.add_scalar(ops.neg(cos), 1.0))
        total = term if total is None else ops.add(total, term)
    return total


class WorkerState:
    """A worker: private data view, private model, own seed, role.

    ``data`` is the parent dataset and ``indices`` the worker's slice of it.
    Randomness is keyed only by ``seed``, never by ``worker_id``, so two
    workers with equal data and seed behave identically.
    """

    def __init__(self, worker_id, data, indices, spec, seed, role="honest"):
        self.worker_id = int(worker_id)
        self.data = data
        self.indices = np.asarray(indices, dtype=np.int64)
        self.spec = spec
        self.seed = int(seed)
        self.role = role
        self.params = None
        self._by_class = [self.indices[data.labels[self.indices] == c] for c in range(data.n_c)]

    @property
    def size(self):
        return len(self.indices)

    def held(self, c):
        return self._by_class[c]

    def real_batch(self, c, batch_size, gen):
        """Up to ``batch_size`` distinct own images of class ``c``: (images, indices)."""
        from .data import class_batch
        return class_batch(self.data, [self.indices], 0, c, batch_size, gen)

    def model_for_round(self, round_idx, cfg):
        """The private model, re-initialised every ``reinit_interval`` rounds."""
        if self.params is None or round_idx % cfg.reinit_interval == 0:
            epoch = round_idx // cfg.reinit_interval
            self.params = nn.build_model(self.spec, _rng.derive_seed(self.seed, "model", epoch))
        return self.params


def class_pixel_grad(params, spec, s_block, real_images, label_row, c):
    """(matching loss, d loss / d pixels) for one class block."""
    if label_row is None:
        lab_real = np.full(len(real_images), c, dtype=np.int64)
        lab_syn = np.full(len(s_block), c, dtype=np.int64)
    else:
        lab_real = np.repeat(label_row[None, :], len(real_images), axis=0)
        lab_syn = np.repeat(label_row[None, :], len(s_block), axis=0)
    with Tape():
        g_real = [g.detach() for g in nn.grad_params(params, spec, real_images, lab_real)]
    with Tape():
        s = Tensor(s_block, requires_grad=True)
        g_syn = nn.grad_params(params, spec, s, lab_syn, retain_graph=True)
        loss = matching_loss(g_syn, g_real)
        gpix, = backward(loss, [s])
    return float(loss.item()), gpix.data


def local_round(worker, S, cfg, defense=None, round_idx=0, trace=None, batch_fn=None):
    """One worker round: matched pixel steps on every class block, then local model training.

    Returns the worker's updated synthetic set; ``S`` is not modified.  When a
    ``trace`` dict is given it receives worker-side instrumentation (model
    snapshot, real indices used, label rows, loss); it never leaves the worker
    through the protocol.  ``batch_fn(c, batch_size, gen)`` replaces the real
    batch source (default: ``worker.real_batch``).
    """
    defense = defense or NoDefense()
    spec = worker.spec
    if S.n_c != spec.n_c or S.image_shape != spec.input_shape:
        raise ContractError("synthetic set does not fit the worker's model")
    for c in range(S.n_c):
        if len(worker.held(c)) == 0:
            raise EmptyClassError(f"worker {worker.worker_id} holds no samples of class {c}")
    params = worker.model_for_round(round_idx, cfg)
    label_rows = [defense.label(c, S.n_c, _rng.stream(worker.seed, "label", round_idx, c)) for c in range(S.n_c)]
    if trace is not None:
        trace.update(model=params.copy(), labels=label_rows, real_indices=[], losses=[])
    images = np.array(S.images, copy=True)
    lr = np.float32(cfg.lr_img)
    for step in range(cfg.img_steps):
        grads = []
        total = 0.0
        used = []
        for c in range(S.n_c):
            gen = _rng.stream(worker.seed, "batch", round_idx, step, c)
            real, idx = (batch_fn or worker.real_batch)(c, cfg.real_batch, gen)
            block = images[c * S.ipc:(c + 1) * S.ipc]
            loss, g = class_pixel_grad(params, spec, block, real, label_rows[c], c)
            total += loss
            grads.append(g)
            used.append(idx)
        if cfg.lr_img != 0:
            for c, g in enumerate(grads):
                sl = slice(c * S.ipc, (c + 1) * S.ipc)
                images[sl] = np.clip(images[sl] - lr * g, 0.0, 1.0)
        if trace is not None:
            trace["real_indices"].append(used)
            trace["losses"].append(total)
    if cfg.lr_img == 0:
        out = S
    else:
        raw = images - S.images
        delta = defense.postprocess(raw, S.ipc, _rng.stream(worker.seed, "ldp", round_idx))
        if delta is not raw:
            images = np.clip(S.images + delta, 0.0, 1.0).astype(np.float32)
        out = S.with_images(images)
    worker.params = nn.train(params, out, cfg.model_train, _rng.derive_seed(worker.seed, "train", round_idx))
    return out


def init_synthetic(n_c, ipc, image_shape, seed):
    """Gaussian(0, 1) pixels, class-major, keyed by ``seed``."""
    if ipc < 1:
        raise InvalidInputError(f"ipc must be >= 1, got {ipc}")
    gen = _rng.stream(seed, "init_synthetic")
    arr = gen.standard_normal((n_c * ipc,) + tuple(image_shape)).astype(np.float32)
    return SyntheticDataset(arr, n_c, ipc)


def centralized_distill(ds, ipc, rounds, cfg, seed, spec=None, callback=None):
    """Single holder of all of ``ds`` running ``rounds`` local rounds on a fresh synthetic set.

    ``callback(round_idx, S)`` is invoked after each round when given.
    """
    spec = spec or nn.ModelSpec(input_shape=ds.image_shape, n_c=ds.n_c)
    if np.any(ds.class_counts() == 0):
        raise EmptyClassError("centralized distillation needs every class")
    S = init_synthetic(ds.n_c, ipc, ds.image_shape, _rng.derive_seed(seed, "synthetic"))
    holder = WorkerState(0, ds, np.arange(len(ds)), spec, _rng.derive_seed(seed, "central"))
    for r in range(rounds):
        S = local_round(holder, S, cfg, None, r)
        if callback is not None:
            callback(r, S)
    return S
