import os
import struct

import numpy as np
import pytest

from sfdd import cli, data, distill
from sfdd.errors import FormatError

from conftest import toy_dataset


@pytest.fixture
def workspace(tmp_path):
    data.save_csv(toy_dataset(m_per_class=8), tmp_path / "train.csv")
    data.save_csv(toy_dataset(m_per_class=4, seed=1), tmp_path / "test.csv")
    cfg = tmp_path / "c.cfg"
    cfg.write_text("\n".join([
        f"train_csv={tmp_path / 'train.csv'}", f"test_csv={tmp_path / 'test.csv'}",
        "image_shape=1,6,6", "n_c=4", "k=2", "net_width=3", "net_depth=1",
        "rounds=2", "eval_every=1", "eval_steps=5", "eval_batch=16", "eval_lr=0.05",
        "n_evals=2", "real_batch=3", "lr_img=0.5", "model_steps=2", "threads=1",
        "attack_iterations=3", "trigger_size=2", "asr_models=2",
        "# comment line", ""]))
    return tmp_path, cfg


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_final(path):
    rows = [line.split(",") for line in open(path).read().splitlines()[1:]]
    return {r[2]: float(r[3]) for r in rows if r[2].startswith("final")}


def test_feddistill_writes_outputs_and_evaluate_matches(workspace, capsys):
    tmp, cfg = workspace
    out = tmp / "fed"
    assert run("feddistill", "--config", cfg, "--clients", 2, "--ipc", 2, "--out", out) == 0
    assert sorted(os.listdir(out)) == ["distilled.sfdd", "metrics.csv", "resolved.cfg"]
    resolved = (out / "resolved.cfg").read_text()
    assert "clients=2" in resolved and "ipc=2" in resolved
    final = read_final(out / "metrics.csv")
    capsys.readouterr()
    assert run("evaluate", "--config", cfg, "--in", out / "distilled.sfdd", "--out", tmp / "ev") == 0
    printed = capsys.readouterr().out
    assert f"accuracy {final['final_accuracy']:.4f} +- {final['final_accuracy_stderr']:.4f}" in printed
    ev = [line.split(",") for line in (tmp / "ev" / "metrics.csv").read_text().splitlines()[1:]]
    assert float(ev[0][3]) == final["final_accuracy"] and float(ev[1][3]) == final["final_accuracy_stderr"]


def test_identical_runs_identical_metrics(workspace):
    tmp, cfg = workspace
    assert run("feddistill", "--config", cfg, "--clients", 2, "--out", tmp / "a") == 0
    assert run("feddistill", "--config", cfg, "--clients", 2, "--out", tmp / "b") == 0
    assert (tmp / "a" / "metrics.csv").read_bytes() == (tmp / "b" / "metrics.csv").read_bytes()
    assert (tmp / "a" / "distilled.sfdd").read_bytes() == (tmp / "b" / "distilled.sfdd").read_bytes()


@pytest.mark.parametrize("command,extra,outputs", [
    ("distill", [], {"distilled.sfdd", "metrics.csv"}),
    ("attack-leak", ["--set", "net_act=sigmoid", "--set", "net_pooling=none", "--set", "net_norm=none",
                     "--set", "real_batch=1"], {"trace.csv", "metrics.csv"}),
    ("attack-doorping", ["--clients", 3], {"distilled.sfdd", "metrics.csv"}),
    ("ldp-grid", ["--clients", 2, "--set", "ldp_grid=inf:0.0,1.0:0.1", "--set", "rounds=1",
                  "--set", "net_act=sigmoid", "--set", "net_pooling=none", "--set", "net_norm=none",
                  "--set", "real_batch=1"], {"ldp_grid.csv"}),
])
def test_other_commands(workspace, command, extra, outputs):
    tmp, cfg = workspace
    out = tmp / command
    assert run(command, "--config", cfg, "--out", out, *extra) == 0
    assert outputs | {"resolved.cfg"} <= set(os.listdir(out))


def test_defense_flags(workspace):
    tmp, cfg = workspace
    assert run("feddistill", "--config", cfg, "--clients", 2, "--defense", "ldpo_rld", "--epsilon", 0.2,
               "--k", 2, "--out", tmp / "d") == 0
    assert run("feddistill", "--config", cfg, "--clients", 2, "--defense", "ldp", "--clip", 1.0,
               "--sigma", 0.05, "--out", tmp / "e") == 0


def test_unknown_flag_exits_2(workspace, capsys):
    assert run("feddistill", "--frobnicate") == 2


def test_unknown_subcommand_exits_2():
    assert run("teleport") == 2


def test_unknown_config_key_is_named(workspace, capsys):
    tmp, cfg = workspace
    bad = tmp / "bad.cfg"
    bad.write_text(cfg.read_text() + "\nwarp_factor=9\n")
    assert run("feddistill", "--config", bad, "--out", tmp / "x") == 2
    assert "warp_factor" in capsys.readouterr().err


@pytest.mark.parametrize("args,key", [(["--ipc", "zero"], "ipc"), (["--epsilon", "1.5"], "epsilon"),
                                      (["--set", "k=9"], "k"), (["--set", "nope=1"], "nope")])
def test_bad_values_exit_2(workspace, capsys, args, key):
    tmp, cfg = workspace
    assert run("feddistill", "--config", cfg, "--out", tmp / "x", *args) == 2
    assert key in capsys.readouterr().err


def test_runtime_failure_exits_1(workspace, capsys):
    tmp, cfg = workspace
    junk = tmp / "junk.sfdd"
    junk.write_bytes(b"NOPE" + bytes(40))
    assert run("evaluate", "--config", cfg, "--in", junk, "--out", tmp / "x") == 1
    assert "magic" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert run("feddistill", "--config", tmp_path / "none.cfg") == 2


# ---- .sfdd format

def test_sfdd_round_trip_and_size(tmp_path):
    S = distill.init_synthetic(3, 4, (2, 5, 6), 1)
    p = tmp_path / "s.sfdd"
    cli.save_synthetic(S, p)
    again = cli.load_synthetic(p)
    assert again.images.tobytes() == S.images.tobytes() and (again.n_c, again.ipc) == (3, 4)
    raw = p.read_bytes()
    assert len(raw) == cli.HEADER.size + 4 * 3 * 4 * 2 * 5 * 6 + 4 * 3
    assert raw[:4] == b"SFDD"
    assert struct.unpack_from("<6I", raw, 4) == (1, 3, 4, 2, 5, 6)
    first = struct.unpack_from("<f", raw, cli.HEADER.size)[0]
    assert first == S.images[0, 0, 0, 0]
    assert list(struct.unpack_from("<3I", raw, len(raw) - 12)) == [0, 1, 2]


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"XFDD" + b[4:], 0),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], 4),
    (lambda b: b[:-1], None),
    (lambda b: b[:10], 10),
    (lambda b: b + b"\0", None),
])
def test_sfdd_corruption(tmp_path, mutate, offset):
    p = tmp_path / "s.sfdd"
    cli.save_synthetic(distill.init_synthetic(2, 1, (1, 2, 2), 0), p)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(FormatError) as info:
        cli.load_synthetic(p)
    if offset is not None:
        assert info.value.offset == offset


def test_truncated_sfdd_nonzero_exit(workspace):
    tmp, cfg = workspace
    p = tmp / "t.sfdd"
    cli.save_synthetic(distill.init_synthetic(4, 1, (1, 6, 6), 0), p)
    p.write_bytes(p.read_bytes()[:-5])
    assert run("evaluate", "--config", cfg, "--in", p, "--out", tmp / "x") != 0


def test_config_parsing():
    cfg = cli.parse_config("ipc = 3  # trailing\n\nrounds=7\n")
    assert cfg == {"ipc": 3, "rounds": 7}
    with pytest.raises(cli.ConfigError):
        cli.parse_config("ipc\n")
    grid = cli.parse_grid("inf:0.0,0.5:0.1:laplace")
    assert grid[0].clip == float("inf") and grid[1].kind == "laplace"
    with pytest.raises(ValueError):
        cli.parse_grid("1.0")
