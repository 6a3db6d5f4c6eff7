"""Metrics: accuracy, distilled-set utility over several fresh models, and the run log."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import rng as _rng
from .errors import ConsistencyError, InvalidInputError

PHASES = ("train", "eval", "attack")
CSV_FIELDS = ("round", "phase", "metric", "value", "seed")


def argmax_lowest(logits):
    """Row-wise argmax; np.argmax already returns the first (lowest) index on ties."""
    return np.argmax(np.asarray(logits), axis=1)


def accuracy(params, spec, ds, batch_size=500):
    """Fraction of rows whose argmax logit equals the label."""
    images, labels = nn.training_arrays(ds)
    if len(labels) == 0:
        raise InvalidInputError("accuracy needs a non-empty dataset")
    pred = argmax_lowest(nn.predict(params, spec, images, batch_size))
    return float(np.mean(pred == np.asarray(labels)))


def mean_stderr(values):
    """Mean and standard error (sample std with ddof=1, over sqrt(n))."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()) if len(v) else float("nan"), 0.0
    if np.all(v == v[0]):
        # exact for replicated runs; summation would leave a rounding residue
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def evaluate_distilled(S, spec, trainer, test_ds, n_evals=5, seed=0, seeds=None):
    """Train ``n_evals`` fresh models on ``S`` and test each one.

    Returns (mean, stderr, accuracies).  Model ``i`` uses init/training seeds
    derived from ``(seed, i)``; ``seeds`` overrides the per-model seeds.
    """
    if n_evals < 2:
        raise InvalidInputError("evaluate_distilled needs n_evals >= 2")
    seeds = list(seeds) if seeds is not None else [_rng.derive_seed(seed, "eval", i) for i in range(n_evals)]
    if len(seeds) != n_evals:
        raise InvalidInputError("need one seed per evaluation")
    accs = []
    for s in seeds:
        params = nn.build_model(spec, s)
        params = nn.train(params, S, trainer, _rng.derive_seed(s, "fit"))
        accs.append(accuracy(params, spec, test_ds))
    mean, err = mean_stderr(accs)
    return mean, err, accs


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    phase: str
    metric: str
    value: float
    seed: int

    def __post_init__(self):
        if self.phase not in PHASES:
            raise InvalidInputError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not math.isfinite(self.value):
            raise InvalidInputError(f"metric {self.metric} is not finite: {self.value}")

    @property
    def key(self):
        return (self.round, self.phase, self.metric, self.seed)


class MetricsLog:
    """Append-only list of records with a unique (round, phase, metric, seed) key."""

    def __init__(self):
        self.records = []
        self._keys = set()

    def add(self, round_idx, phase, metric, value, seed=0):
        rec = MetricsRecord(int(round_idx), phase, metric, float(value), int(seed))
        if rec.key in self._keys:
            raise ConsistencyError(f"duplicate metrics record {rec.key}")
        self._keys.add(rec.key)
        self.records.append(rec)
        return rec

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def select(self, phase=None, metric=None):
        return [r for r in self.records
                if (phase is None or r.phase == phase) and (metric is None or r.metric == metric)]

    def last(self, phase, metric):
        found = self.select(phase, metric)
        return found[-1] if found else None

    def rounds(self, phase="train"):
        return sorted({r.round for r in self.records if r.phase == phase})

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(CSV_FIELDS)
            for r in self.records:
                out.writerow([r.round, r.phase, r.metric, repr(r.value), r.seed])

    @classmethod
    def read_csv(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            rows = csv.reader(fh)
            header = next(rows, None)
            if tuple(header or ()) != CSV_FIELDS:
                raise InvalidInputError(f"{path}: expected header {','.join(CSV_FIELDS)}")
            for row in rows:
                log.add(int(row[0]), row[1], row[2], float(row[3]), int(row[4]))
        return log
