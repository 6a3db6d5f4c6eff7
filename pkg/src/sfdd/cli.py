"""Command-line front end: ``sfdd <command> [--config FILE] [overrides]``.

Configuration is plain ``key=value`` text (``#`` starts a comment).  Every run
writes ``resolved.cfg`` with all keys next to its outputs.  Exit status is 0 on
success, 2 for argument or configuration errors, 1 for runtime failures.
"""

import argparse
import math
import os
import struct
import sys
import time

import numpy as np

from . import attacks, data, distill, evalx, federation, nn, privacy
from . import rng as _rng
from .errors import FormatError, SFDDError

SFDD_MAGIC = b"SFDD"
SFDD_VERSION = 1
HEADER = struct.Struct("<4sIIIIII")

# key -> default; the default's type is the parse type
DEFAULTS = {
    "seed": 0,
    "out": "runs/out",
    "train_images": "",
    "train_labels": "",
    "test_images": "",
    "test_labels": "",
    "train_csv": "",
    "test_csv": "",
    "image_shape": "1,28,28",
    "n_c": 10,
    "ipc": 10,
    "clients": 5,
    "rounds": 50,
    "eval_every": 5,
    "patience": 3,
    "convergence_delta": 0.2,
    "weighting": "equal",
    "threads": 0,
    "lr_img": 0.1,
    "img_steps": 1,
    "real_batch": 64,
    "reinit_interval": 10,
    "model_lr": 0.01,
    "model_batch": 256,
    "model_steps": 10,
    "eval_lr": 0.01,
    "eval_batch": 256,
    "eval_steps": 100,
    "n_evals": 5,
    "net_width": 32,
    "net_depth": 2,
    "net_act": "relu",
    "net_norm": "instance",
    "net_pooling": "avg",
    "defense": "none",
    "epsilon": 0.2,
    "k": 3,
    "clip": 1.0,
    "sigma": 0.0,
    "noise": "gaussian",
    "attack_round": 1,
    "attack_worker": 0,
    "attack_iterations": 300,
    "attack_lr": 0.1,
    "trigger_size": 8,
    "trigger_target": 0,
    "trigger_lr": 0.1,
    "trigger_steps": 5,
    "asr_models": 3,
    "ldp_grid": "inf:0.0,1.0:0.0,1.0:0.05,0.5:0.1",
    "ldp_threshold": 0.0,
    "in": "",
}

FLAG_KEYS = {"ipc": "ipc", "clients": "clients", "rounds": "rounds", "defense": "defense",
             "epsilon": "epsilon", "k": "k", "clip": "clip", "sigma": "sigma", "seed": "seed",
             "out": "out", "in_path": "in"}


class ConfigError(SFDDError):
    def __init__(self, key, message):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


def _parse_value(key, text):
    default = DEFAULTS[key]
    text = str(text).strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_config(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(key, f"{source}:{lineno}: unknown key")
        out[key] = _parse_value(key, value)
    return out


def resolve(config_path=None, overrides=None):
    cfg = dict(DEFAULTS)
    if config_path:
        with open(config_path) as fh:
            cfg.update(parse_config(fh.read(), config_path))
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = _parse_value(key, value)
    _validate(cfg)
    return cfg


def _validate(cfg):
    for key in ("ipc", "clients", "rounds", "n_evals", "img_steps", "real_batch"):
        if cfg[key] < 1:
            raise ConfigError(key, "must be >= 1")
    if cfg["defense"] not in ("none", "ldpo_rld", "ldp"):
        raise ConfigError("defense", "must be none, ldpo_rld or ldp")
    if cfg["noise"] not in ("gaussian", "laplace"):
        raise ConfigError("noise", "must be gaussian or laplace")
    if not 0 <= cfg["epsilon"] < 1:
        raise ConfigError("epsilon", "must lie in [0, 1)")
    if not 1 <= cfg["k"] <= cfg["n_c"] - 1:
        raise ConfigError("k", "must lie in [1, n_c - 1]")
    if not cfg["clip"] > 0:
        raise ConfigError("clip", "must be > 0")
    if cfg["sigma"] < 0:
        raise ConfigError("sigma", "must be >= 0")
    try:
        shape = image_shape(cfg)
    except ValueError:
        raise ConfigError("image_shape", "expected C,H,W") from None
    if len(shape) != 3:
        raise ConfigError("image_shape", "expected C,H,W")
    try:
        parse_grid(cfg["ldp_grid"], cfg["noise"])
    except ValueError as exc:
        raise ConfigError("ldp_grid", str(exc)) from None


def write_config(cfg, path):
    with open(path, "w") as fh:
        for key in DEFAULTS:
            fh.write(f"{key}={cfg[key]}\n")


def image_shape(cfg):
    return tuple(int(v) for v in str(cfg["image_shape"]).split(","))


def parse_grid(text, kind="gaussian"):
    """``clip:sigma[:kind]`` cells separated by commas; ``inf`` disables clipping."""
    cells = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) not in (2, 3):
            raise ValueError(f"bad grid cell {part!r}")
        clip = math.inf if bits[0].strip() in ("inf", "Inf") else float(bits[0])
        cells.append(privacy.LdpParams(clip, bits[2].strip() if len(bits) == 3 else kind, float(bits[1])))
    if not cells:
        raise ValueError("empty grid")
    return cells


# ---------------------------------------------------------------- .sfdd files

def save_synthetic(S, path):
    """Header (magic, version, n_c, ipc, C, H, W), float32 pixels class-major, one u32 label per block."""
    c, h, w = S.image_shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(SFDD_MAGIC, SFDD_VERSION, S.n_c, S.ipc, c, h, w))
        fh.write(np.ascontiguousarray(S.images, dtype="<f4").tobytes())
        fh.write(np.arange(S.n_c, dtype="<u4").tobytes())


def load_synthetic(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header", len(raw))
    magic, version, n_c, ipc, c, h, w = HEADER.unpack_from(raw)
    if magic != SFDD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != SFDD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    count = n_c * ipc * c * h * w
    need = HEADER.size + 4 * count + 4 * n_c
    if len(raw) < need:
        raise FormatError(f"{path}: truncated, expected {need} bytes", len(raw))
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes", need)
    images = np.frombuffer(raw, dtype="<f4", count=count, offset=HEADER.size).reshape(n_c * ipc, c, h, w)
    labels = np.frombuffer(raw, dtype="<u4", count=n_c, offset=HEADER.size + 4 * count)
    if not np.array_equal(labels, np.arange(n_c)):
        raise FormatError(f"{path}: block labels must be 0..n_c-1 in order", HEADER.size + 4 * count)
    return distill.SyntheticDataset(images.astype(np.float32), n_c, ipc)


# ---------------------------------------------------------------- run assembly

def load_datasets(cfg):
    n_c = cfg["n_c"]
    if cfg["train_csv"]:
        shape = image_shape(cfg)
        train = data.load_csv(cfg["train_csv"], shape, n_c)
        test = data.load_csv(cfg["test_csv"], shape, n_c) if cfg["test_csv"] else None
        return train, test
    if cfg["train_images"]:
        train = data.load_idx(cfg["train_images"], cfg["train_labels"], n_c)
        test = data.load_idx(cfg["test_images"], cfg["test_labels"], n_c) if cfg["test_images"] else None
        return train, test
    return data.load_desk_mnist()


def model_spec(cfg, shape):
    return nn.ModelSpec(input_shape=shape, n_c=cfg["n_c"], net_width=cfg["net_width"],
                        net_depth=cfg["net_depth"], net_act=cfg["net_act"], net_norm=cfg["net_norm"],
                        net_pooling=cfg["net_pooling"])


def distill_config(cfg):
    return distill.DistillConfig(cfg["lr_img"], cfg["img_steps"],
                                 nn.TrainerConfig(cfg["model_lr"], cfg["model_batch"], cfg["model_steps"]),
                                 cfg["reinit_interval"], cfg["real_batch"])


def eval_trainer(cfg):
    return nn.TrainerConfig(cfg["eval_lr"], cfg["eval_batch"], cfg["eval_steps"])


def protocol_config(cfg, shape, z=None):
    return federation.ProtocolConfig(
        z=z or cfg["clients"], ipc=cfg["ipc"], max_rounds=cfg["rounds"], eval_every=cfg["eval_every"],
        patience=cfg["patience"], convergence_delta=cfg["convergence_delta"], distill=distill_config(cfg),
        spec=model_spec(cfg, shape), eval_trainer=eval_trainer(cfg), n_evals=cfg["n_evals"],
        weighting=cfg["weighting"], threads=cfg["threads"])


def defense_hook(cfg):
    return privacy.make_defense_hook(cfg["defense"], k=cfg["k"], eps=cfg["epsilon"], clip=cfg["clip"],
                                     sigma=cfg["sigma"], noise=cfg["noise"])


def eval_seed(cfg):
    return _rng.derive_seed(cfg["seed"], "eval")


def _say(msg):
    print(msg, flush=True)


def _need_test(test):
    if test is None:
        raise SFDDError("this command needs a test set (test_images/test_labels or test_csv)")
    return test


def cmd_distill(cfg, out):
    train, test = load_datasets(cfg)
    spec = model_spec(cfg, train.image_shape)
    log = evalx.MetricsLog()
    S = distill.centralized_distill(train, cfg["ipc"], cfg["rounds"], distill_config(cfg), cfg["seed"], spec)
    if test is not None:
        mean, err, _ = evalx.evaluate_distilled(S, spec, eval_trainer(cfg), test, cfg["n_evals"], eval_seed(cfg))
        log.add(cfg["rounds"], "eval", "final_accuracy", mean, cfg["seed"])
        log.add(cfg["rounds"], "eval", "final_accuracy_stderr", err, cfg["seed"])
        _say(f"accuracy {mean:.4f} +- {err:.4f}")
    save_synthetic(S, os.path.join(out, "distilled.sfdd"))
    log.write_csv(os.path.join(out, "metrics.csv"))


def _final_records(log, res, seed):
    acc = [r for r in log.select("eval", "accuracy") if r.round == res.best_round]
    err = [r for r in log.select("eval", "accuracy_stderr") if r.round == res.best_round]
    if acc:
        log.add(res.best_round, "eval", "final_accuracy", acc[0].value, seed)
        log.add(res.best_round, "eval", "final_accuracy_stderr", err[0].value, seed)
        _say(f"accuracy {acc[0].value:.4f} +- {err[0].value:.4f} (round {res.best_round})")


def cmd_feddistill(cfg, out):
    train, test = load_datasets(cfg)
    pcfg = protocol_config(cfg, train.image_shape)
    res = federation.run_protocol(train, pcfg, cfg["seed"], test, defense_hook(cfg))
    _final_records(res.log, res, cfg["seed"])
    save_synthetic(res.S, os.path.join(out, "distilled.sfdd"))
    res.log.write_csv(os.path.join(out, "metrics.csv"))


def leak_setup(train, pcfg, seed, defense, attack_round, attack_worker):
    """Run the protocol up to ``attack_round`` and capture what the server sees for one worker.

    Returns (AttackConfig knowledge pieces, true real batches per class).
    """
    if pcfg.distill.img_steps != 1:
        raise SFDDError("the leakage attack emulates a single pixel step; set img_steps=1")
    workers = federation.build_workers(train, pcfg, seed)
    S = distill.init_synthetic(train.n_c, pcfg.ipc, train.image_shape, _rng.derive_seed(seed, "synthetic"))
    for r in range(attack_round + 1):
        traces = {}
        S_next, updates = federation.run_round(r, S, workers, pcfg, defense, traces=traces)
        if r == attack_round:
            upd = next(u for u in updates if u.worker_id == attack_worker)
            tr = traces[attack_worker]
            truth = [train.images[idx] for idx in tr["real_indices"][0]]
            return tr["model"], S, upd.S, truth
        S = S_next
    raise SFDDError("attack round not reached")


def cmd_attack_leak(cfg, out):
    train, _ = load_datasets(cfg)
    pcfg = protocol_config(cfg, train.image_shape)
    model, S_prev, observed, truth = leak_setup(train, pcfg, cfg["seed"], defense_hook(cfg),
                                                cfg["attack_round"], cfg["attack_worker"])
    b = min(len(t) for t in truth)
    if any(len(t) != b for t in truth):
        raise SFDDError("real batches differ in size across classes; lower real_batch")
    acfg = attacks.AttackConfig(model, S_prev, observed, cfg["lr_img"], b, cfg["attack_iterations"],
                                cfg["attack_lr"], _rng.derive_seed(cfg["seed"], "attack"))
    res = attacks.deep_leakage(acfg, truth)
    _, mse = attacks.reconstruction_mse(res.leaked, truth)
    res.write_trace(os.path.join(out, "trace.csv"))
    log = evalx.MetricsLog()
    log.add(cfg["attack_round"], "attack", "attack_loss", res.trace[-1][1], cfg["seed"])
    log.add(cfg["attack_round"], "attack", "mse", mse, cfg["seed"])
    log.write_csv(os.path.join(out, "metrics.csv"))
    _say(f"reconstruction mse {mse:.4f}")


def make_triggers(cfg, z):
    return {k: attacks.new_trigger(cfg["trigger_size"], cfg["trigger_target"],
                                   _rng.derive_seed(cfg["seed"], "trigger", k),
                                   lr=cfg["trigger_lr"], refresh_steps=cfg["trigger_steps"])
            for k in federation.malicious_ids(z)}


def mean_asr(S, spec, trainer, test, triggers, n_models, seed):
    """ASR averaged over malicious triggers and ``n_models`` fresh models trained on ``S``."""
    rates = []
    for i in range(n_models):
        s = _rng.derive_seed(seed, "asr", i)
        params = nn.train(nn.build_model(spec, s), S, trainer, _rng.derive_seed(s, "fit"))
        for trig in triggers.values():
            rates.append(attacks.asr(params, spec, test.images, test.labels, trig))
    return float(np.mean(rates)) if rates else 0.0


def cmd_attack_doorping(cfg, out):
    train, test = load_datasets(cfg)
    test = _need_test(test)
    pcfg = protocol_config(cfg, train.image_shape)
    triggers = make_triggers(cfg, pcfg.z)
    res = federation.run_protocol(train, pcfg, cfg["seed"], test, defense_hook(cfg), triggers)
    rate = mean_asr(res.S, pcfg.spec, pcfg.eval_trainer, test, triggers, cfg["asr_models"], cfg["seed"])
    res.log.add(res.best_round, "attack", "asr", rate, cfg["seed"])
    _final_records(res.log, res, cfg["seed"])
    save_synthetic(res.S, os.path.join(out, "distilled.sfdd"))
    res.log.write_csv(os.path.join(out, "metrics.csv"))
    _say(f"asr {rate:.4f} with {len(triggers)} malicious of {pcfg.z}")


def cmd_evaluate(cfg, out):
    if not cfg["in"]:
        raise ConfigError("in", "evaluate needs --in FILE")
    S = load_synthetic(cfg["in"])
    _, test = load_datasets(cfg)
    test = _need_test(test)
    spec = model_spec(cfg, S.image_shape)
    mean, err, _ = evalx.evaluate_distilled(S, spec, eval_trainer(cfg), test, cfg["n_evals"], eval_seed(cfg))
    log = evalx.MetricsLog()
    log.add(0, "eval", "accuracy", mean, cfg["seed"])
    log.add(0, "eval", "accuracy_stderr", err, cfg["seed"])
    log.write_csv(os.path.join(out, "metrics.csv"))
    _say(f"accuracy {mean:.4f} +- {err:.4f}")


def cmd_ldp_grid(cfg, out):
    train, test = load_datasets(cfg)
    test = _need_test(test)
    pcfg = protocol_config(cfg, train.image_shape)
    seed = cfg["seed"]

    def attack_mse(hook):
        model, S_prev, observed, truth = leak_setup(train, pcfg, seed, hook, cfg["attack_round"], cfg["attack_worker"])
        acfg = attacks.AttackConfig(model, S_prev, observed, cfg["lr_img"], len(truth[0]),
                                    cfg["attack_iterations"], cfg["attack_lr"], _rng.derive_seed(seed, "attack"))
        return attacks.reconstruction_mse(attacks.deep_leakage(acfg).leaked, truth)[1]

    def utility(hook):
        res = federation.run_protocol(train, pcfg, seed, test, hook)
        return max(r.value for r in res.log.select("eval", "accuracy"))

    grid = parse_grid(cfg["ldp_grid"], cfg["noise"])
    result = privacy.ldp_grid_search(grid, attack_mse, utility, cfg["ldp_threshold"])
    result.write_csv(os.path.join(out, "ldp_grid.csv"))
    best = result.best
    _say("no feasible cell" if best is None else
         f"best clip={best['clip']} sigma={best['sigma']} mse={best['mse']:.4f} accuracy={best['accuracy']:.4f}")


COMMANDS = {
    "distill": cmd_distill,
    "feddistill": cmd_feddistill,
    "attack-leak": cmd_attack_leak,
    "attack-doorping": cmd_attack_doorping,
    "evaluate": cmd_evaluate,
    "ldp-grid": cmd_ldp_grid,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="sfdd", description="Secure federated dataset distillation lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--ipc")
        p.add_argument("--clients")
        p.add_argument("--rounds")
        p.add_argument("--defense", choices=["none", "ldpo_rld", "ldp"])
        p.add_argument("--epsilon")
        p.add_argument("--k")
        p.add_argument("--clip")
        p.add_argument("--sigma")
        p.add_argument("--in", dest="in_path", help="input .sfdd file (evaluate)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        overrides = {key: getattr(args, attr) for attr, key in FLAG_KEYS.items()}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(item, "--set expects KEY=VALUE")
            key, value = item.split("=", 1)
            if key.strip() not in DEFAULTS:
                raise ConfigError(key.strip(), "unknown key")
            overrides[key.strip()] = value
        cfg = resolve(args.config, overrides)
    except ConfigError as exc:
        print(f"sfdd: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"sfdd: error: cannot read config: {exc}", file=sys.stderr)
        return 2
    out = cfg["out"]
    try:
        os.makedirs(out, exist_ok=True)
        write_config(cfg, os.path.join(out, "resolved.cfg"))
        t0 = time.time()
        COMMANDS[args.command](cfg, out)
        _say(f"{args.command} finished in {time.time() - t0:.1f}s; outputs in {out}")
    except ConfigError as exc:
        print(f"sfdd: error: {exc}", file=sys.stderr)
        return 2
    except (SFDDError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"sfdd: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
