import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfdd import distill, nn, privacy, rng
from sfdd.errors import InvalidParameterError

from conftest import toy_dataset


def test_weights_sum_to_one_and_decrease():
    for k in range(1, 10):
        w = privacy.lin_weights(k)
        assert w.sum() == pytest.approx(1.0, abs=1e-15)
        assert np.all(np.diff(w) < 0) if k > 1 else True


def test_eps_zero_is_one_hot():
    p = privacy.lin_disperse(4, 10, 3, 0.0, rng.stream(0, "x"))
    assert np.array_equal(p, np.eye(10)[4])


def test_worked_example_with_fixed_order():
    p = privacy.lin_disperse(2, 10, 3, 0.3, order=[5, 7, 1])
    expect = np.zeros(10)
    expect[[2, 5, 7, 1]] = [0.7, 0.15, 0.10, 0.05]
    np.testing.assert_allclose(p, expect, atol=1e-15)


@pytest.mark.parametrize("y,k,eps", [(0, 10, 0.2), (0, 0, 0.2), (10, 3, 0.2), (0, 3, 1.0), (0, 3, -0.1)])
def test_bad_parameters(y, k, eps):
    with pytest.raises(InvalidParameterError):
        privacy.lin_disperse(y, 10, k, eps, rng.stream(0, "x"))


def test_bad_order():
    with pytest.raises(InvalidParameterError):
        privacy.lin_disperse(2, 10, 3, 0.3, order=[5, 2, 1])
    with pytest.raises(InvalidParameterError):
        privacy.lin_disperse(2, 10, 3, 0.3, order=[5, 5, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 12).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n - 1), st.integers(1, n - 1))),
       st.one_of(st.just(0.0), st.floats(1e-9, 0.99)), st.integers(0, 2 ** 32))
def test_simplex_and_support(args, eps, seed):
    n_c, y, k = args
    p = privacy.lin_disperse(y, n_c, k, eps, rng.stream(seed, "lin"))
    assert privacy.is_simplex(p)
    assert p[y] == pytest.approx(1 - eps)
    if eps > 0:
        assert np.count_nonzero(p) == k + 1


def test_non_primary_mass_is_exchangeable():
    n_c, y, k, eps = 10, 3, 3, 0.2
    draws = 10 ** 5
    gen = rng.stream(11, "exchange")
    total = np.zeros(n_c)
    for _ in range(draws):
        total += privacy.lin_disperse(y, n_c, k, eps, gen)
    mean = total / draws
    w = eps * privacy.lin_weights(k)
    mu = eps / (n_c - 1)
    var = np.sum(w ** 2) / (n_c - 1) - mu ** 2
    sd = math.sqrt(var / draws)
    others = np.delete(mean, y)
    assert np.all(np.abs(others - mu) <= 3 * sd)


# ---- LocalDP

def test_small_delta_unchanged_without_noise():
    d = np.full((2, 1, 2, 2), 0.1, dtype=np.float32)
    out = privacy.apply_ldp(d, privacy.LdpParams(1.0, "gaussian", 0.0), rng.stream(0, "n"))
    assert np.array_equal(out, d)


def test_clip_to_unit_norm():
    d = np.zeros((1, 1, 10, 10), dtype=np.float32)
    d[0, 0, 0, :] = [6, 8] + [0] * 8
    out = privacy.apply_ldp(d, privacy.LdpParams(1.0, "gaussian", 0.0), rng.stream(0, "n"))
    assert np.linalg.norm(out) == pytest.approx(1.0, rel=1e-6)
    np.testing.assert_allclose(out[0, 0, 0, :2], [0.6, 0.8], rtol=1e-6)


@pytest.mark.parametrize("kind,factor", [("gaussian", 1.0), ("laplace", math.sqrt(2))])
def test_noise_std(kind, factor):
    d = np.zeros((1000, 1, 10, 10), dtype=np.float32)
    out = privacy.apply_ldp(d, privacy.LdpParams(1.0, kind, 0.1), rng.stream(3, "n"))
    std = out.astype(np.float64).std()
    assert 0.095 * factor <= std <= 0.105 * factor


def test_clip_monotone_in_threshold():
    gen = np.random.default_rng(0)
    d = gen.normal(size=(20, 1, 3, 3)).astype(np.float32)
    prev = None
    for c in [0.1, 0.5, 1.0, 2.0, 5.0, math.inf]:
        norms = np.linalg.norm(privacy.clip_rows(d, c).reshape(20, -1), axis=1)
        assert np.all(norms <= c * (1 + 1e-6))
        if prev is not None:
            assert np.all(norms >= prev - 1e-6)
        prev = norms


def test_ldp_params_validation():
    with pytest.raises(InvalidParameterError):
        privacy.LdpParams(0.0)
    with pytest.raises(InvalidParameterError):
        privacy.LdpParams(1.0, "cauchy", 0.1)
    with pytest.raises(InvalidParameterError):
        privacy.LdpParams(1.0, "gaussian", -1)


# ---- hooks

def run_round(hook, spec):
    ds = toy_dataset(n_c=spec.n_c, shape=spec.input_shape)
    w = distill.WorkerState(0, ds, np.arange(len(ds)), spec, 2)
    S = distill.init_synthetic(spec.n_c, 2, spec.input_shape, 1)
    trace = {}
    out = distill.local_round(w, S, distill.DistillConfig(lr_img=0.5, real_batch=4), hook, 0, trace)
    return out, trace


def test_identity_hooks_bit_identical(tiny_spec):
    base, _ = run_round(None, tiny_spec)
    for hook in (privacy.make_defense_hook("none"), privacy.make_defense_hook("ldpo_rld", k=3, eps=0.0),
                 privacy.make_defense_hook("ldp", clip=math.inf, sigma=0.0)):
        out, _ = run_round(hook, tiny_spec)
        assert out.equals(base), hook.describe()


def test_ldpo_rld_changes_update_and_keeps_labels_secret(tiny_spec):
    base, _ = run_round(None, tiny_spec)
    out, trace = run_round(privacy.make_defense_hook("ldpo_rld", k=2, eps=0.2), tiny_spec)
    assert not out.equals(base)
    assert all(privacy.is_simplex(r) for r in trace["labels"])
    # only pixels leave the worker; the synthetic labels are the public class blocks
    assert np.array_equal(out.labels, base.labels)


def test_ldpo_rld_one_draw_used_for_both_batches(tiny_spec, monkeypatch):
    rows = []
    orig = distill.class_pixel_grad

    def spy(params, spec, s_block, real, label_row, c):
        rows.append(label_row)
        return orig(params, spec, s_block, real, label_row, c)

    monkeypatch.setattr(distill, "class_pixel_grad", spy)
    _, trace = run_round(privacy.LdpoRld(2, 0.2), tiny_spec)
    assert len(rows) == tiny_spec.n_c
    assert all(r is t for r, t in zip(rows, trace["labels"]))


def test_unknown_hook():
    with pytest.raises(InvalidParameterError):
        privacy.make_defense_hook("homomorphic")


# ---- grid search

def test_single_cell_grid():
    cell = privacy.LdpParams(1.0, "gaussian", 0.1)
    res = privacy.ldp_grid_search([cell], lambda h: 0.3, lambda h: 0.8, threshold=0.5)
    assert len(res.rows) == 1 and res.rows[0]["mse"] == 0.3 and res.rows[0]["accuracy"] == 0.8
    assert res.best is None and res.feasible == []


def test_grid_ranking(tmp_path):
    cells = [privacy.LdpParams(1.0, "gaussian", s) for s in (0.0, 0.05, 0.1, 0.2)]
    mse = {0.0: 0.1, 0.05: 0.6, 0.1: 0.7, 0.2: 0.9}
    acc = {0.0: 0.9, 0.05: 0.85, 0.1: 0.8, 0.2: 0.5}
    res = privacy.ldp_grid_search(cells, lambda h: mse[h.params.sigma], lambda h: acc[h.params.sigma], 0.5)
    assert [r["sigma"] for r in res.rows] == [0.05, 0.1, 0.2, 0.0]
    assert res.best["sigma"] == 0.05
    res.write_csv(tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "clip,sigma,kind,mse,accuracy"
