"""Adversaries: the server's deep-leakage inversion of a worker update, and a simplified Doorping backdoor.

Deep leakage.  The curious server knows the model snapshot a worker used in a
round, the synthetic set it sent out (``S_prev``) and the update it got back.
It emulates the worker's pixel step with a trainable stand-in for the real
batch and fits that stand-in so the emulated update matches the observed one.
The emulated step has to reproduce the worker's single pixel step exactly,
so only ``img_steps == 1`` rounds can be attacked.

Doorping (simplified).  A malicious worker keeps a small corner trigger.
Each round it first nudges the trigger to raise its private model's logit for
the target class, then distills normally except that the real batch for the
target class is replaced by triggered images drawn from all classes.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import nn
from . import rng as _rng
from .distill import local_round, matching_loss
from .errors import AttackDiverged, ContractError, InvalidParameterError
from .tensorcore import NonFiniteError, Tape, Tensor, backward, no_record, ops

TRACE_FIELDS = ("iter", "attack_loss", "mse_mean")


# ---------------------------------------------------------------- deep leakage

@dataclass
class AttackConfig:
    """Server-side knowledge plus optimiser settings.

    ``params`` is the worker's model snapshot for the attacked round,
    ``S_prev`` the synthetic set sent to the worker and ``observed`` the
    set it returned.  Labels are assumed one-hot (the protocol default).
    """

    params: nn.ModelParams
    S_prev: object
    observed: object
    lr_img: float
    batch_size: int
    iterations: int = 300
    lr: float = 0.1
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    init: np.ndarray = None

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidParameterError("iterations must be >= 1")
        if self.observed.images.shape != self.S_prev.images.shape:
            raise ContractError("observed update and previous set differ in shape")
        if self.lr_img <= 0:
            raise InvalidParameterError("the attacked round must have lr_img > 0")


@dataclass
class AttackResult:
    leaked: np.ndarray
    trace: list = field(default_factory=list)

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(TRACE_FIELDS)
            for it, loss, mse in self.trace:
                out.writerow([it, repr(loss), "" if mse is None else repr(mse)])


def emulated_update(params, spec, s_block, lb, c, lr_img):
    """The worker's clamped pixel step on one class block as a recorded function of ``lb``."""
    lab_syn = np.full(len(s_block), c, dtype=np.int64)
    lab_real = np.full(lb.shape[0], c, dtype=np.int64)
    g_real = nn.grad_params(params, spec, lb, lab_real, retain_graph=True)
    s = Tensor(s_block, requires_grad=True)
    g_syn = nn.grad_params(params, spec, s, lab_syn, retain_graph=True)
    gpix, = backward(matching_loss(g_syn, g_real), [s], retain_graph=True)
    return ops.clamp(ops.sub(Tensor._wrap(s.data), ops.mul_scalar(gpix, np.float32(lr_img))), 0.0, 1.0)


def attack_loss(cfg, lb_array, need_grad=True):
    """(||observed - emulated|| / lr_img, gradient w.r.t. the leaked batch)."""
    try:
        return _attack_loss(cfg, lb_array, need_grad)
    except NonFiniteError as exc:
        raise AttackDiverged(f"attack loss is not finite: {exc}") from exc


def _attack_loss(cfg, lb_array, need_grad):
    params = cfg.params
    spec = params.spec
    S, obs = cfg.S_prev, cfg.observed
    with Tape():
        lb = Tensor(lb_array, requires_grad=True)
        sq = None
        for c in range(S.n_c):
            lb_c = ops.take_rows(lb, c * cfg.batch_size, cfg.batch_size)
            new = emulated_update(params, spec, S.block(c), lb_c, c, cfg.lr_img)
            d = ops.sub(new, Tensor._wrap(obs.block(c)))
            term = ops.sum(ops.mul(d, d))
            sq = term if sq is None else ops.add(sq, term)
        loss = ops.mul_scalar(ops.sqrt(sq), 1.0 / cfg.lr_img)
        if not np.isfinite(loss.item()):
            raise AttackDiverged(f"attack loss is not finite ({loss.item()})")
        if not need_grad:
            return loss.item(), None
        g, = backward(loss, [lb])
    return loss.item(), g.data


def deep_leakage(cfg, truth=None):
    """Fit a leaked batch (n_c * batch_size images) to the observed update with Adam.

    A step that raises the loss is undone and the learning rate halved, so the
    recorded loss trace never increases.  ``truth`` (optional, same layout)
    only feeds the ``mse_mean`` column of the trace.
    """
    S = cfg.S_prev
    shape = (S.n_c * cfg.batch_size,) + tuple(S.image_shape)
    if cfg.init is not None:
        x = np.array(cfg.init, dtype=np.float32).reshape(shape)
    else:
        x = _rng.stream(cfg.seed, "leak_init").standard_normal(shape).astype(np.float32)
    b1, b2 = cfg.betas
    m = np.zeros_like(x, dtype=np.float64)
    v = np.zeros_like(x, dtype=np.float64)
    lr = cfg.lr
    best_x, best_loss, best_g = None, np.inf, None
    trace = []
    t = 0
    for it in range(cfg.iterations):
        loss, g = attack_loss(cfg, x)
        if loss <= best_loss:
            best_x, best_loss, best_g = x.copy(), loss, g
        else:
            x, g, lr = best_x.copy(), best_g, lr * 0.5
        mse = None
        if truth is not None:
            mse = reconstruction_mse(best_x.reshape((S.n_c, cfg.batch_size) + tuple(S.image_shape)),
                                     truth)[1]
        trace.append((it, best_loss, mse))
        if best_loss == 0:
            break
        t += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g.astype(np.float64) ** 2
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = (x - lr * mhat / (np.sqrt(vhat) + 1e-8)).astype(np.float32)
    leaked = best_x.reshape((S.n_c, cfg.batch_size) + tuple(S.image_shape))
    return AttackResult(leaked, trace)


def _minmax(batch):
    lo, hi = float(batch.min()), float(batch.max())
    if hi - lo <= 0:
        return np.zeros(batch.shape, dtype=np.float64)
    return (batch.astype(np.float64) - lo) / (hi - lo)


def reconstruction_mse(leaked, truth):
    """Per-class and mean MSE after min-max normalising each class batch.

    Within a class, leaked images are paired with true images by the
    assignment minimising the total squared error.  Returns (per_class, mean).
    """
    leaked = [np.asarray(b) for b in leaked]
    truth = [np.asarray(b) for b in truth]
    if len(leaked) != len(truth) or any(a.shape != b.shape for a, b in zip(leaked, truth)):
        raise ContractError("leaked and true batches differ in layout")
    per_class = []
    for a, b in zip(leaked, truth):
        an = _minmax(a).reshape(len(a), -1)
        bn = _minmax(b).reshape(len(b), -1)
        cost = ((an[:, None, :] - bn[None, :, :]) ** 2).mean(axis=2)
        rows, cols = linear_sum_assignment(cost)
        per_class.append(float(cost[rows, cols].mean()))
    return per_class, float(np.mean(per_class))


# ---------------------------------------------------------------- Doorping

@dataclass
class TriggerState:
    """A t x t patch pasted at the bottom-right corner; values stay in [0, 1]."""

    patch: np.ndarray
    target: int
    lr: float = 0.1
    refresh_steps: int = 5
    probe_size: int = 64

    def __post_init__(self):
        p = np.asarray(self.patch, dtype=np.float32)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise InvalidParameterError("patch must be square (t, t)")
        if p.size and (p.min() < 0 or p.max() > 1):
            raise InvalidParameterError("patch values must lie in [0, 1]")
        self.patch = p

    @property
    def size(self):
        return self.patch.shape[0]


def new_trigger(t, target, seed, **kw):
    """Uniform random t x t patch keyed by ``seed``."""
    patch = _rng.stream(seed, "trigger").uniform(0.0, 1.0, size=(t, t)).astype(np.float32)
    return TriggerState(patch, int(target), **kw)


def apply_trigger(images, trig):
    """Copy of ``images`` with the patch written into the bottom-right corner of every channel."""
    out = np.array(images, dtype=np.float32, copy=True)
    t = trig.size
    if t == 0:
        return out
    if t > min(out.shape[-2:]):
        raise InvalidParameterError(f"patch of size {t} does not fit {out.shape[-2:]}")
    out[..., -t:, -t:] = trig.patch
    return out


def _patched(x, patch_t, t):
    """Recorded x with its bottom-right t x t corner replaced by ``patch_t``."""
    n, c, h, w = x.shape
    mask = np.ones((1, 1, h, w), dtype=np.float32)
    mask[..., -t:, -t:] = 0
    plane = ops.pad2d(ops.reshape(patch_t, (1, 1, t, t)), h, w, h - t, w - t)
    return ops.add(ops.mul(Tensor._wrap(x.data), Tensor._wrap(mask)), plane)


def refresh_trigger(trig, params, spec, probe):
    """``refresh_steps`` signed-gradient ascent steps on the mean target logit of patched probes."""
    t = trig.size
    patch = trig.patch.copy()
    for _ in range(trig.refresh_steps):
        with Tape():
            p = Tensor(patch, requires_grad=True)
            logits = nn.forward(params, spec, _patched(Tensor(probe), p, t))
            onehot = np.zeros(logits.shape, dtype=np.float32)
            onehot[:, trig.target] = 1.0 / len(probe)
            score = ops.dot(logits, Tensor._wrap(onehot))
            g, = backward(score, [p])
        patch = np.clip(patch + np.float32(trig.lr) * np.sign(g.data), 0.0, 1.0).astype(np.float32)
    trig.patch = patch
    return trig


def doorping_local_round(worker, S, cfg, trig, round_idx=0, trace=None):
    """Malicious round: refresh the trigger, then distill with a poisoned target-class batch.

    The target class's real batch is replaced by triggered images sampled from
    all of the worker's classes; labels are left as they are.
    """
    params = worker.model_for_round(round_idx, cfg)
    gen = _rng.stream(worker.seed, "probe", round_idx)
    held = worker.indices
    if trig.refresh_steps > 0:
        probe_idx = held[gen.choice(len(held), size=min(trig.probe_size, len(held)), replace=False)]
        refresh_trigger(trig, params, worker.spec, worker.data.images[probe_idx])

    def batch_fn(c, batch_size, g):
        if c != trig.target:
            return worker.real_batch(c, batch_size, g)
        pick = held[g.choice(len(held), size=min(batch_size, len(held)), replace=False)]
        return apply_trigger(worker.data.images[pick], trig), pick

    return local_round(worker, S, cfg, None, round_idx, trace, batch_fn)


def asr(params, spec, test_images, test_labels, trig):
    """Fraction of triggered test images (true class != target) predicted as the target."""
    keep = np.asarray(test_labels) != trig.target
    if not np.any(keep):
        return 0.0
    with no_record():
        logits = nn.predict(params, spec, apply_trigger(np.asarray(test_images)[keep], trig))
    return float(np.mean(np.argmax(logits, axis=1) == trig.target))
