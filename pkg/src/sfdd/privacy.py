"""Defenses: secret label dispersion (LDPO-RLD) and the LocalDP clip-and-noise baseline.

A defense hook is consulted by a worker in two places:

* ``label(c, n_c, gen)`` once per class per round; the returned probability
  row (or None for a plain one-hot label) is used for both the synthetic-batch
  and the real-batch cross-entropy of that class;
* ``postprocess(delta, ipc, gen)`` on the outgoing update delta.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

GRID_FIELDS = ("clip", "sigma", "kind", "mse", "accuracy")


def lin_weights(k):
    """Linearly decreasing shares 2(k - j + 1) / (k (k + 1)) for j = 1..k; they sum to 1."""
    j = np.arange(1, k + 1, dtype=np.float64)
    return 2.0 * (k - j + 1) / (k * (k + 1))


def lin_disperse(y, n_c, k, eps, gen=None, order=None):
    """Soft label keeping 1 - eps on ``y`` and spreading eps over ``k`` other classes.

    The k classes are drawn uniformly without replacement from the classes
    other than ``y`` (or given explicitly as ``order``); the j-th drawn class
    gets ``eps * lin_weights(k)[j - 1]``.
    """
    if not 0 <= eps < 1:
        raise InvalidParameterError(f"eps must lie in [0, 1), got {eps}")
    if not 1 <= k <= n_c - 1:
        raise InvalidParameterError(f"k must lie in [1, n_c - 1] = [1, {n_c - 1}], got {k}")
    if not 0 <= y < n_c:
        raise InvalidParameterError(f"class {y} out of range for n_c={n_c}")
    p = np.zeros(n_c, dtype=np.float64)
    p[y] = 1.0 - eps
    if eps == 0:
        return p
    if order is None:
        others = np.array([c for c in range(n_c) if c != y])
        order = others[gen.permutation(len(others))[:k]]
    order = np.asarray(order, dtype=np.int64)
    if len(order) != k or len(set(order.tolist())) != k or y in order:
        raise InvalidParameterError("order must hold k distinct classes other than y")
    p[order] = eps * lin_weights(k)
    return p


def is_simplex(p, tol=1e-6):
    p = np.asarray(p, dtype=np.float64)
    return bool(np.all(p >= 0) and abs(p.sum() - 1.0) <= tol)


@dataclass(frozen=True)
class LdpParams:
    clip: float = 1.0
    kind: str = "gaussian"
    sigma: float = 0.0

    def __post_init__(self):
        if not self.clip > 0:
            raise InvalidParameterError(f"clip must be > 0, got {self.clip}")
        if self.sigma < 0 or not math.isfinite(self.sigma):
            raise InvalidParameterError(f"sigma must be finite and >= 0, got {self.sigma}")
        if self.kind not in ("gaussian", "laplace"):
            raise InvalidParameterError(f"noise kind must be gaussian|laplace, got {self.kind!r}")


def clip_rows(delta, clip):
    """Scale each leading-axis slice of ``delta`` to L2 norm at most ``clip``."""
    d = np.asarray(delta)
    flat = d.reshape(len(d), -1).astype(np.float64)
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    scale = np.ones_like(norms)
    big = norms > clip
    scale[big] = clip / norms[big]
    return (flat * scale[:, None]).reshape(d.shape).astype(d.dtype)


def apply_ldp(delta, params, gen):
    """Per-image clip to L2 <= clip, then i.i.d. noise.

    Gaussian noise has standard deviation ``sigma``; Laplace noise has scale
    ``sigma`` (standard deviation sigma * sqrt(2)).
    """
    out = clip_rows(delta, params.clip)
    if params.sigma == 0:
        return out
    if params.kind == "gaussian":
        noise = gen.normal(0.0, params.sigma, size=out.shape)
    else:
        noise = gen.laplace(0.0, params.sigma, size=out.shape)
    return (out + noise).astype(out.dtype)


class NoDefense:
    kind = "none"

    def label(self, c, n_c, gen):
        return None

    def postprocess(self, delta, ipc, gen):
        return delta

    def describe(self):
        return {"defense": "none"}


class LdpoRld:
    """Secret soft labels: one ``lin_disperse`` draw per (worker, class, round)."""

    kind = "ldpo_rld"

    def __init__(self, k=3, eps=0.2):
        if not 0 <= eps < 1 or k < 1:
            raise InvalidParameterError(f"need 0 <= eps < 1 and k >= 1, got eps={eps}, k={k}")
        self.k = int(k)
        self.eps = float(eps)

    def label(self, c, n_c, gen):
        return lin_disperse(c, n_c, self.k, self.eps, gen)

    def postprocess(self, delta, ipc, gen):
        return delta

    def describe(self):
        return {"defense": "ldpo_rld", "k": self.k, "epsilon": self.eps}


class LocalDP:
    """Clip and noise the outgoing update delta; labels stay one-hot."""

    kind = "ldp"

    def __init__(self, params):
        self.params = params

    def label(self, c, n_c, gen):
        return None

    def postprocess(self, delta, ipc, gen):
        return apply_ldp(delta, self.params, gen)

    def describe(self):
        p = self.params
        return {"defense": "ldp", "clip": p.clip, "sigma": p.sigma, "noise": p.kind}


def make_defense_hook(kind, **params):
    """``none``; ``ldpo_rld`` with k, eps; ``ldp`` with clip, sigma, noise (gaussian|laplace)."""
    if kind in (None, "none"):
        return NoDefense()
    if kind == "ldpo_rld":
        return LdpoRld(params.get("k", 3), params.get("eps", 0.2))
    if kind == "ldp":
        return LocalDP(LdpParams(params.get("clip", 1.0), params.get("noise", "gaussian"), params.get("sigma", 0.0)))
    raise InvalidParameterError(f"unknown defense {kind!r}")


@dataclass
class GridResult:
    rows: list
    threshold: float

    @property
    def feasible(self):
        return [r for r in self.rows if r["mse"] >= self.threshold]

    @property
    def best(self):
        """Most accurate cell whose attack MSE reaches the threshold, or None."""
        feas = self.feasible
        return feas[0] if feas else None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(GRID_FIELDS)
            for r in self.rows:
                out.writerow([repr(r["clip"]), repr(r["sigma"]), r["kind"], repr(r["mse"]), repr(r["accuracy"])])


def ldp_grid_search(grid, attack_mse, utility, threshold=0.0):
    """Measure every LdpParams cell: ``attack_mse(defense)`` and ``utility(defense)``.

    Rows come back ranked: cells meeting ``mse >= threshold`` first, by
    decreasing accuracy, then the infeasible cells, also by accuracy.
    """
    rows = []
    for params in grid:
        hook = LocalDP(params)
        rows.append({"clip": params.clip, "sigma": params.sigma, "kind": params.kind,
                     "mse": float(attack_mse(hook)), "accuracy": float(utility(hook))})
    rows.sort(key=lambda r: (r["mse"] < threshold, -r["accuracy"]))
    return GridResult(rows, threshold)
