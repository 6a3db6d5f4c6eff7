import dataclasses

import numpy as np
import pytest

from sfdd import attacks, distill, nn, privacy
from sfdd.errors import AttackDiverged, ContractError, InvalidParameterError

from conftest import toy_dataset

ATTACK_SPEC = nn.ModelSpec(input_shape=(1, 6, 6), n_c=3, net_width=2, net_depth=1,
                           net_act="sigmoid", net_norm="none", net_pooling="none")


def observed_round(hook=None, batch=1, lr_img=0.1, spec=ATTACK_SPEC):
    ds = toy_dataset(m_per_class=6, n_c=spec.n_c, shape=spec.input_shape)
    w = distill.WorkerState(0, ds, np.arange(len(ds)), spec, 8)
    cfg = distill.DistillConfig(lr_img=lr_img, real_batch=batch)
    S = distill.local_round(w, distill.init_synthetic(spec.n_c, 1, spec.input_shape, 2), cfg, None, 0)
    trace = {}
    S2 = distill.local_round(w, S, cfg, hook, 1, trace)
    truth = np.stack([ds.images[idx] for idx in trace["real_indices"][0]])
    return attacks.AttackConfig(trace["model"], S, S2, lr_img, batch, iterations=20, seed=1), truth


def test_true_batch_is_an_exact_fixed_point():
    for batch in (1, 2):
        cfg, truth = observed_round(batch=batch)
        loss, _ = attacks.attack_loss(cfg, truth.reshape((-1,) + truth.shape[2:]))
        assert loss == 0.0


def test_true_batch_not_a_fixed_point_under_ldpo_rld():
    cfg, truth = observed_round(privacy.LdpoRld(2, 0.2))
    loss, _ = attacks.attack_loss(cfg, truth.reshape((-1,) + truth.shape[2:]))
    assert loss > 0


def test_deep_leakage_trace_is_monotone_and_improves():
    cfg, truth = observed_round()
    res = attacks.deep_leakage(cfg, truth)
    losses = [t[1] for t in res.trace]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
    assert res.leaked.shape == truth.shape
    assert all(t[2] is not None for t in res.trace)


def test_deep_leakage_stops_at_exact_solution():
    cfg, truth = observed_round()
    cfg = dataclasses.replace(cfg, init=truth)
    res = attacks.deep_leakage(cfg)
    assert len(res.trace) == 1 and res.trace[0][1] == 0.0
    assert np.array_equal(res.leaked, truth)


def test_attack_uses_only_server_state():
    cfg, truth = observed_round()
    names = {f.name for f in dataclasses.fields(attacks.AttackConfig)}
    assert names == {"params", "S_prev", "observed", "lr_img", "batch_size", "iterations", "lr", "seed",
                     "betas", "init"}
    # nothing in the config refers to the worker's dataset
    for f in ("S_prev", "observed"):
        assert isinstance(getattr(cfg, f), distill.SyntheticDataset)


def test_attack_divergence_is_reported():
    cfg, truth = observed_round()
    cfg = dataclasses.replace(cfg, lr_img=1e-320)
    with pytest.raises(AttackDiverged):
        attacks.attack_loss(cfg, np.zeros((3, 1, 6, 6), np.float32) + 0.5)


def test_attack_config_validation():
    cfg, _ = observed_round()
    with pytest.raises(InvalidParameterError):
        dataclasses.replace(cfg, iterations=0)
    with pytest.raises(ContractError):
        dataclasses.replace(cfg, observed=distill.init_synthetic(3, 2, (1, 6, 6), 0))


def test_trace_csv(tmp_path):
    res = attacks.AttackResult(np.zeros((1, 1, 1, 2, 2)), [(0, 1.5, 0.2), (1, 1.0, None)])
    res.write_trace(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines() == ["iter,attack_loss,mse_mean", "0,1.5,0.2", "1,1.0,"]


# ---- reconstruction MSE

def loop_mse(a, b):
    """Brute force over all within-class permutations, normalisation by explicit loops."""
    from itertools import permutations

    def norm(x):
        lo, hi = float(np.min(x)), float(np.max(x))
        return (x.astype(np.float64) - lo) / (hi - lo) if hi > lo else np.zeros(x.shape)

    per = []
    for ca, cb in zip(a, b):
        na, nb = norm(ca), norm(cb)
        best = np.inf
        for perm in permutations(range(len(na))):
            tot = 0.0
            for i, j in enumerate(perm):
                d = (na[i] - nb[j]).ravel()
                tot += sum(float(v) ** 2 for v in d) / d.size
            best = min(best, tot / len(na))
        per.append(best)
    return per, sum(per) / len(per)


def test_mse_identity_and_complement():
    gen = np.random.default_rng(0)
    truth = gen.integers(0, 2, size=(3, 1, 1, 4, 4)).astype(np.float32)
    truth[:, :, :, 0, 0] = 0
    truth[:, :, :, 0, 1] = 1
    assert attacks.reconstruction_mse(truth, truth)[1] == 0.0
    assert attacks.reconstruction_mse(1 - truth, truth)[1] == 1.0


def test_mse_matches_brute_force_oracle():
    gen = np.random.default_rng(1)
    a = gen.uniform(size=(2, 3, 1, 3, 3))
    b = gen.uniform(size=(2, 3, 1, 3, 3))
    per, mean = attacks.reconstruction_mse(a, b)
    ref_per, ref_mean = loop_mse(a, b)
    np.testing.assert_allclose(per, ref_per, atol=1e-6)
    assert mean == pytest.approx(ref_mean, abs=1e-6)


def test_mse_symmetric_and_scale_insensitive():
    gen = np.random.default_rng(2)
    a = gen.uniform(size=(2, 3, 1, 3, 3))
    b = gen.uniform(size=(2, 3, 1, 3, 3))
    assert attacks.reconstruction_mse(a, b)[1] == pytest.approx(attacks.reconstruction_mse(b, a)[1], abs=1e-12)
    assert attacks.reconstruction_mse(a, 2 * b)[1] == pytest.approx(attacks.reconstruction_mse(a, b)[1], abs=1e-6)


def test_mse_shape_mismatch():
    with pytest.raises(ContractError):
        attacks.reconstruction_mse(np.zeros((2, 1, 1, 2, 2)), np.zeros((2, 2, 1, 2, 2)))


# ---- Doorping

def test_trigger_validation_and_application():
    with pytest.raises(InvalidParameterError):
        attacks.TriggerState(np.ones((2, 3)), 0)
    with pytest.raises(InvalidParameterError):
        attacks.TriggerState(np.full((2, 2), 1.5), 0)
    trig = attacks.TriggerState(np.array([[0.1, 0.2], [0.3, 0.4]]), 1)
    imgs = np.zeros((2, 3, 5, 5), np.float32)
    out = attacks.apply_trigger(imgs, trig)
    assert np.array_equal(out[:, :, 3:, 3:], np.broadcast_to(trig.patch, (2, 3, 2, 2)))
    assert np.all(out[:, :, :3, :] == 0) and np.all(imgs == 0)
    with pytest.raises(InvalidParameterError):
        attacks.apply_trigger(np.zeros((1, 1, 1, 1)), trig)


def test_refresh_raises_target_logit(tiny_spec):
    ds = toy_dataset()
    params = nn.build_model(tiny_spec, 3)
    trig = attacks.new_trigger(3, 2, 0, refresh_steps=5, lr=0.1)
    before = nn.predict(params, tiny_spec, attacks.apply_trigger(ds.images, trig))[:, 2].mean()
    attacks.refresh_trigger(trig, params, tiny_spec, ds.images)
    after = nn.predict(params, tiny_spec, attacks.apply_trigger(ds.images, trig))[:, 2].mean()
    assert after > before and trig.patch.min() >= 0 and trig.patch.max() <= 1


def test_zero_trigger_is_a_no_op_on_zero_corners(tiny_spec):
    ds = toy_dataset()
    images = np.array(ds.images)
    images[..., -2:, -2:] = 0
    ds = type(ds)(images, ds.labels, ds.n_c)
    S = distill.init_synthetic(4, 1, (1, 6, 6), 0)
    cfg = distill.DistillConfig(lr_img=0.5, real_batch=3)
    trig = attacks.TriggerState(np.zeros((2, 2)), 1, refresh_steps=0)
    bad = distill.WorkerState(0, ds, np.arange(len(ds)), tiny_spec, 4, "malicious")
    poisoned = attacks.doorping_local_round(bad, S, cfg, trig, 0)
    # the same round with the poisoned batch source but no trigger pasted
    honest = distill.WorkerState(0, ds, np.arange(len(ds)), tiny_spec, 4)
    held = honest.indices

    def untriggered(c, b, g):
        if c != 1:
            return honest.real_batch(c, b, g)
        pick = held[g.choice(len(held), size=min(b, len(held)), replace=False)]
        return ds.images[pick], pick

    assert poisoned.equals(distill.local_round(honest, S, cfg, None, 0, None, untriggered))


def test_poisoned_round_keeps_labels_and_draws_all_classes(tiny_spec):
    ds = toy_dataset()
    S = distill.init_synthetic(4, 2, (1, 6, 6), 0)
    cfg = distill.DistillConfig(lr_img=0.5, real_batch=12)
    trig = attacks.new_trigger(2, 1, 5)
    w = distill.WorkerState(0, ds, np.arange(len(ds)), tiny_spec, 4, "malicious")
    trace = {}
    out = attacks.doorping_local_round(w, S, cfg, trig, 0, trace)
    assert np.array_equal(out.labels, S.labels)
    used = trace["real_indices"][0]
    assert len(set(ds.labels[used[1]].tolist())) > 1
    assert all(np.all(ds.labels[used[c]] == c) for c in (0, 2, 3))


def test_asr_examples(tiny_spec):
    ds = toy_dataset(m_per_class=20)
    spec = nn.ModelSpec(input_shape=(1, 6, 6), n_c=4, net_depth=0)
    const = nn.build_model(spec, 0, zero=True)
    bias = np.zeros(4, np.float32)
    bias[3] = 1
    const = const.replace([const.arrays()[0], bias])
    trig = attacks.new_trigger(2, 3, 0)
    assert attacks.asr(const, spec, ds.images, ds.labels, trig) == 1.0
    model = nn.build_model(tiny_spec, 1)
    empty = attacks.TriggerState(np.zeros((0, 0)), 2)
    pred = np.argmax(nn.predict(model, tiny_spec, ds.images), axis=1)
    keep = ds.labels != 2
    assert attacks.asr(model, tiny_spec, ds.images, ds.labels, empty) == np.mean(pred[keep] == 2)
    perm = np.random.default_rng(0).permutation(len(ds))
    trig = attacks.new_trigger(3, 2, 1)
    assert attacks.asr(model, tiny_spec, ds.images, ds.labels, trig) == pytest.approx(
        attacks.asr(model, tiny_spec, ds.images[perm], ds.labels[perm], trig), abs=1e-12)
