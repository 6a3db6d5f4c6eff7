"""The federated distillation protocol: workers update a shared synthetic set, the server averages.

The server side of this module only ever handles ``RoundUpdate`` values and the
previous synthetic set; real images stay inside ``WorkerState``.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as _data
from . import evalx, nn
from . import rng as _rng
from .distill import DistillConfig, SyntheticDataset, WorkerState, init_synthetic, local_round
from .errors import ContractError, InvalidInputError, InvalidSpecError, WorkerFailure
from .privacy import NoDefense

__all__ = ["ProtocolConfig", "RoundUpdate", "WorkerState", "fedavg", "init_synthetic",
           "build_workers", "malicious_ids", "run_round", "run_protocol", "worker_threads"]


@dataclass(frozen=True)
class RoundUpdate:
    worker_id: int
    S: SyntheticDataset
    round_idx: int


@dataclass(frozen=True)
class ProtocolConfig:
    z: int = 5
    ipc: int = 10
    max_rounds: int = 50
    eval_every: int = 5
    patience: int = 3
    convergence_delta: float = 0.2
    distill: DistillConfig = field(default_factory=DistillConfig)
    spec: nn.ModelSpec = field(default_factory=nn.ModelSpec)
    eval_trainer: nn.TrainerConfig = field(default_factory=nn.TrainerConfig)
    n_evals: int = 5
    weighting: str = "equal"
    threads: int = 0

    def __post_init__(self):
        if self.z < 1 or self.max_rounds < 1 or self.ipc < 1:
            raise InvalidSpecError("need z, ipc, max_rounds >= 1")
        if self.eval_every < 1 or self.patience < 1 or self.n_evals < 2:
            raise InvalidSpecError("need eval_every, patience >= 1 and n_evals >= 2")
        if self.weighting not in ("equal", "size"):
            raise InvalidSpecError(f"weighting must be equal|size, got {self.weighting!r}")


def worker_threads(requested, z):
    """Thread count: ``requested``, else SFDD_THREADS, else the CPU count; 0 means auto."""
    n = requested or int(os.environ.get("SFDD_THREADS", "0") or 0)
    if n <= 0:
        n = os.cpu_count() or 1
    return max(1, min(n, z))


def fedavg(updates, sizes=None):
    """Weighted pixel mean sum(s_i * S_i) / sum(s_i), reduced in ascending worker_id."""
    updates = list(updates)
    if not updates:
        raise InvalidInputError("fedavg needs at least one update")
    sizes = [1] * len(updates) if sizes is None else list(sizes)
    if len(sizes) != len(updates):
        raise ContractError("one size per update is required")
    ref = updates[0].S
    for u in updates:
        if u.S.images.shape != ref.images.shape or (u.S.n_c, u.S.ipc) != (ref.n_c, ref.ipc):
            raise ContractError(f"update from worker {u.worker_id} has a different shape")
    order = sorted(range(len(updates)), key=lambda i: updates[i].worker_id)
    acc = np.zeros(ref.images.shape, dtype=np.float64)
    total = 0.0
    for i in order:
        acc += float(sizes[i]) * updates[i].S.images
        total += float(sizes[i])
    if total <= 0:
        raise InvalidInputError("fedavg weights must have a positive sum")
    return ref.with_images((acc / total).astype(np.float32))


def malicious_ids(z):
    """The first floor((z - 1) / 2) workers."""
    return list(range((z - 1) // 2))


def build_workers(ds, cfg, seed, roles=None):
    parts = _data.partition(ds, cfg.z, _rng.derive_seed(seed, "partition"))
    roles = roles or ["honest"] * cfg.z
    return [WorkerState(k, ds, parts[k], cfg.spec, _rng.derive_seed(seed, "worker", k), roles[k])
            for k in range(cfg.z)]


def _worker_task(worker, S, cfg, defense, round_idx, trace, triggers):
    try:
        if worker.role == "malicious":
            from .attacks import doorping_local_round
            out = doorping_local_round(worker, S, cfg.distill, triggers[worker.worker_id], round_idx, trace)
        else:
            out = local_round(worker, S, cfg.distill, defense, round_idx, trace)
        return RoundUpdate(worker.worker_id, out, round_idx)
    except Exception as exc:  # noqa: BLE001 - re-raised with the worker attached
        raise WorkerFailure(worker.worker_id, exc) from exc


def run_round(round_idx, S, workers, cfg, defense=None, order=None, traces=None, triggers=None):
    """Every worker updates ``S`` (honest: ``local_round``; malicious: Doorping), then FedAvg.

    ``order`` fixes the sequential execution order (threads are used
    otherwise); the aggregate does not depend on it.  ``traces`` (a dict)
    collects worker-side instrumentation keyed by worker id.
    Returns (S', updates sorted by worker id).
    """
    defense = defense or NoDefense()
    tr = {w.worker_id: {} for w in workers}
    threads = worker_threads(cfg.threads, len(workers))
    if order is not None or threads == 1:
        seq = [workers[i] for i in order] if order is not None else workers
        updates = [_worker_task(w, S, cfg, defense, round_idx, tr[w.worker_id], triggers) for w in seq]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = [pool.submit(_worker_task, w, S, cfg, defense, round_idx, tr[w.worker_id], triggers)
                    for w in workers]
            updates = [f.result() for f in futs]
    if traces is not None:
        traces.update(tr)
    updates.sort(key=lambda u: u.worker_id)
    by_id = {w.worker_id: w for w in workers}
    sizes = [by_id[u.worker_id].size for u in updates] if cfg.weighting == "size" else None
    return fedavg(updates, sizes), updates


@dataclass
class ProtocolResult:
    S: SyntheticDataset
    log: evalx.MetricsLog
    best_round: int
    rounds_run: int
    final_S: SyntheticDataset
    workers: list
    triggers: dict

    def __iter__(self):
        return iter((self.S, self.log))


def run_protocol(ds, cfg, seed, test_ds=None, defense=None, triggers=None, callback=None):
    """Partition ``ds``, run rounds until ``max_rounds`` or convergence, return the best set.

    Every ``eval_every`` rounds (and after the last one) the current set is
    scored with ``evaluate_distilled`` on ``test_ds``.  Training stops once
    ``patience`` consecutive evaluations fail to beat the best accuracy by at
    least ``convergence_delta`` points.  Without ``test_ds`` no evaluation
    happens and the final set is returned.

    ``triggers`` maps malicious worker ids to ``TriggerState``; those workers
    run the Doorping round.
    """
    defense = defense or NoDefense()
    triggers = triggers or {}
    roles = ["malicious" if k in triggers else "honest" for k in range(cfg.z)]
    workers = build_workers(ds, cfg, seed, roles)
    S = init_synthetic(ds.n_c, cfg.ipc, ds.image_shape, _rng.derive_seed(seed, "synthetic"))
    log = evalx.MetricsLog()
    best, best_acc, best_round, stale = S, -1.0, -1, 0
    r = -1
    for r in range(cfg.max_rounds):
        traces = {}
        S, _ = run_round(r, S, workers, cfg, defense, traces=traces, triggers=triggers)
        losses = [t["losses"][-1] for t in traces.values() if t.get("losses")]
        log.add(r, "train", "matching_loss", float(np.mean(losses)) if losses else 0.0, seed)
        if callback is not None:
            callback(r, S, workers)
        last = r == cfg.max_rounds - 1
        if test_ds is None or not ((r + 1) % cfg.eval_every == 0 or last):
            continue
        mean, err, _ = evalx.evaluate_distilled(S, cfg.spec, cfg.eval_trainer, test_ds, cfg.n_evals,
                                                _rng.derive_seed(seed, "eval"))
        log.add(r, "eval", "accuracy", mean, seed)
        log.add(r, "eval", "accuracy_stderr", err, seed)
        if mean * 100 - best_acc * 100 >= cfg.convergence_delta or best_acc < 0:
            stale = 0
        else:
            stale += 1
        if mean > best_acc:
            best, best_acc, best_round = S, mean, r
        if stale >= cfg.patience:
            break
    if test_ds is None:
        best, best_round = S, r
    return ProtocolResult(best, log, best_round, r + 1, S, workers, triggers)
