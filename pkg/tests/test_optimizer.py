import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupdro.core import Example, GroupedDataset, GroupWeights
from groupdro.errors import ConfigError, InvalidArgument, NumericalError
from groupdro.models import Arch, ModelParams, grad
from groupdro.objectives import worst_group_risk
from groupdro.optimizer import (
    Checkpoint,
    GroupSampler,
    GroupStats,
    OptimizerConfig,
    TrainHistory,
    TrainState,
    dro_step,
    early_stop_select,
    eg_update,
    sgd_momentum_update,
    train,
)


def skewed_convex_data(seed, sizes=(180, 20), d=2):
    """Two groups whose labels depend on opposite directions of feature 0."""
    rng = np.random.default_rng(seed)
    g = np.repeat([0, 1], sizes)
    X = rng.standard_normal((g.size, d))
    direction = np.where(g == 0, 1.0, -1.0)
    y = (direction * X[:, 0] + 0.3 * rng.standard_normal(g.size) > 0).astype(int)
    return GroupedDataset(X, y, g, m=2, K=2)


# eg_update


def test_eg_update_examples():
    q = eg_update(GroupWeights([0.5, 0.5]), 0, math.log(2), 1.0)
    assert np.allclose(q.q, [2 / 3, 1 / 3], atol=1e-15)
    same = eg_update(GroupWeights([0.2, 0.3, 0.5]), 1, 0.0, 1.0)
    assert np.allclose(same.q, [0.2, 0.3, 0.5], atol=1e-15)


def test_eg_update_with_adjustment_matches_scalar_recomputation():
    q0, eta, loss_value = [0.1, 0.6, 0.3], 0.7, 0.45
    adjustment = 2.0 / math.sqrt(4)
    out = eg_update(GroupWeights(q0), 2, loss_value, eta, adjustment)
    raw = [q0[0], q0[1], q0[2] * math.exp(eta * (loss_value + 1.0))]
    total = sum(raw)
    assert np.allclose(out.q, [r / total for r in raw], atol=1e-12, rtol=0)


def test_eg_update_rejects_non_finite_loss():
    with pytest.raises(NumericalError) as info:
        eg_update(GroupWeights([0.5, 0.5]), 1, float("nan"), 0.1)
    assert info.value.diagnostics["group"] == 1


def test_simplex_preserved_under_fuzz():
    rng = np.random.default_rng(0)
    m = 5
    q = GroupWeights(np.full(m, 1 / m))
    groups = rng.integers(m, size=10 ** 5)
    losses = rng.exponential(3.0, size=10 ** 5)
    etas = rng.uniform(0, 2, size=10 ** 5)
    for g, ell, eta in zip(groups, losses, etas):
        q = eg_update(q, int(g), float(ell), float(eta))
        assert q.q.min() >= 0 and abs(q.q.sum() - 1) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(
    q=st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6),
    g=st.integers(0, 5),
    ell=st.floats(1e-3, 10),
    eta=st.floats(1e-3, 1),
)
def test_eg_update_focuses_on_the_updated_group(q, g, ell, eta):
    q = np.asarray(q) / np.sum(q)
    g = g % q.size
    out = eg_update(GroupWeights(q), g, ell, eta).q
    others = np.arange(q.size) != g
    assert out[g] > q[g]
    assert np.all(out[g] / out[others] > q[g] / q[others])
    assert np.allclose(out[others] / out[others].sum(), q[others] / q[others].sum())


# dro_step


def test_dro_step_hand_computed():
    # group 0 loses ln 2, so q -> (2/3, 1/3); the logistic gradient at zero is
    # -(1/2)(x, 1), weighted by m q_0 = 4/3, stepped with eta 0.1 -> 1/15 each
    cfg = OptimizerConfig(eta_theta=0.1, eta_q=1.0, momentum=0.0)
    state = TrainState(np.zeros(2), np.array([0.5, 0.5]), np.zeros(2))
    new = dro_step(state, Example(np.array([1.0]), 1, 0), cfg, [3, 3], Arch.logistic(1))
    assert np.allclose(new.q, [2 / 3, 1 / 3], atol=1e-12, rtol=0)
    assert np.allclose(new.theta, [1 / 15, 1 / 15], atol=1e-12, rtol=0)
    assert np.all(state.theta == 0)


def test_dro_step_single_group_is_plain_sgd():
    rng = np.random.default_rng(1)
    arch = Arch.logistic(3)
    theta = rng.standard_normal(4)
    x = rng.standard_normal(3)
    cfg = OptimizerConfig(eta_theta=0.05, eta_q=0.3, momentum=0.0, lam=0.0)
    new = dro_step(TrainState(theta, np.array([1.0]), np.zeros(4)), Example(x, 1, 0), cfg, [10], arch)
    expected = theta - 0.05 * grad(ModelParams(theta, arch), (x, 1))
    assert np.array_equal(new.theta, expected)
    assert new.q.tolist() == [1.0]


def test_dro_step_with_zero_eta_theta_only_moves_q():
    cfg = OptimizerConfig(eta_theta=0.0, eta_q=0.5)
    theta = np.array([0.3, -0.2])
    new = dro_step(TrainState(theta, np.array([0.5, 0.5]), np.zeros(2)), Example(np.array([2.0]), 0, 1), cfg,
                   [4, 4], Arch.logistic(1))
    assert np.array_equal(new.theta, theta)
    assert new.q[1] > 0.5


def test_adjustment_only_changes_q():
    base = OptimizerConfig(eta_theta=0.1, eta_q=0.5, momentum=0.0)
    adj = OptimizerConfig(eta_theta=0.1, eta_q=0.5, momentum=0.0, adjustment_c=3.0)
    state = TrainState(np.zeros(2), np.array([0.5, 0.5]), np.zeros(2))
    ex = Example(np.array([1.0]), 0, 1)
    a = dro_step(state, ex, base, [100, 4], Arch.logistic(1))
    b = dro_step(state, ex, adj, [100, 4], Arch.logistic(1))
    assert b.q[1] > a.q[1]
    # same gradient direction; only the weight q_1 differs
    assert np.allclose(a.theta / a.q[1], b.theta / b.q[1], atol=1e-12)


def test_l2_shrinks_parameters_without_data():
    theta, velocity = np.array([3.0, -4.0, 1.0]), np.zeros(3)
    norms = [np.linalg.norm(theta)]
    for _ in range(50):
        theta, velocity = sgd_momentum_update(theta, velocity, np.zeros(3), lam=2.0, eta=0.1, momentum=0.0)
        norms.append(np.linalg.norm(theta))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_heavy_ball_momentum():
    theta, v = sgd_momentum_update(np.zeros(1), np.array([2.0]), np.array([1.0]), 0.0, 0.5, 0.9)
    assert v.tolist() == [2.8] and theta.tolist() == [-1.4]


# config


def test_config_validation_and_round_trip():
    cfg = OptimizerConfig(mode="upweight", lam=0.1, adjustment_c=2.0)
    back = OptimizerConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert cfg.to_dict()["lambda"] == 0.1
    for bad in (dict(mode="bogus"), dict(momentum=1.0), dict(lam=-1.0), dict(batch_size=0), dict(eta_theta=-1)):
        with pytest.raises(InvalidArgument):
            OptimizerConfig(**bad)
    with pytest.raises(ConfigError):
        OptimizerConfig.from_dict({"nope": 1})


def test_batch_larger_than_dataset_is_rejected():
    ds = skewed_convex_data(0, sizes=(5, 5))
    with pytest.raises(InvalidArgument):
        train(OptimizerConfig(batch_size=11, epochs=1), ds, ds, Arch.logistic(2))


# train


def test_sampler_is_uniform_over_groups():
    g = np.repeat([0, 1, 2, 3], [900, 60, 30, 10])
    ds = GroupedDataset(np.zeros((1000, 1)), np.zeros(1000, dtype=int), g, m=4)
    sampler = GroupSampler(ds, np.full(4, 0.25), np.random.default_rng(0))
    rows = sampler.draw(10 ** 6)
    freq = np.bincount(ds.g[rows], minlength=4) / 10 ** 6
    assert np.all(np.abs(freq - 0.25) <= 0.01)
    # rows inside the smallest group are all reachable and roughly uniform
    small = np.bincount(rows[ds.g[rows] == 3] - 990, minlength=10)
    assert small.min() > 0.8 * small.mean()


def test_erm_equals_group_dro_with_frozen_proportional_weights():
    ds = skewed_convex_data(3)
    arch = Arch.logistic(2)
    common = dict(eta_theta=0.1, momentum=0.9, lam=0.01, batch_size=16, epochs=5, seed=7)
    erm, _ = train(OptimizerConfig(mode="erm", **common), ds, None, arch)
    frozen, _ = train(OptimizerConfig(mode="group_dro", eta_q=0.0, q_init="proportional",
                                      group_sampling="proportional", **common), ds, None, arch)
    assert np.max(np.abs(erm.theta - frozen.theta)) <= 1e-9


def test_single_group_modes_collapse():
    rng = np.random.default_rng(0)
    ds = GroupedDataset(rng.standard_normal((40, 3)), rng.integers(2, size=40), np.zeros(40, dtype=int), m=1)
    arch = Arch.mlp1(3, 4)
    out = []
    for mode in ("erm", "upweight", "group_dro"):
        cfg = OptimizerConfig(mode=mode, eta_theta=0.05, eta_q=0.5, batch_size=8, epochs=3, seed=2)
        params, hist = train(cfg, ds, ds, arch)
        out.append((params.theta, hist.to_csv()))
    for theta, _ in out[1:]:
        assert np.array_equal(theta, out[0][0])
    assert out[0][1] == out[2][1]


@pytest.mark.parametrize("variant", ["minibatch", "per_example"])
def test_training_is_deterministic(variant):
    ds = skewed_convex_data(5, sizes=(40, 10))
    arch = Arch.mlp1(2, 5)
    cfg = OptimizerConfig(variant=variant, eta_theta=0.05, eta_q=0.1, batch_size=8, epochs=2, seed=11)
    a, ha = train(cfg, ds, ds, arch)
    b, hb = train(cfg, ds, ds, arch)
    assert a.to_json() == b.to_json()
    assert ha.to_csv() == hb.to_csv()
    assert len(ha) == 2
    assert ha.steps == (100 if variant == "per_example" else 2 * 7)


def test_average_iterate_matches_recomputation():
    ds = skewed_convex_data(1, sizes=(20, 10))
    iterates = []
    cfg = OptimizerConfig(eta_theta=0.2, eta_q=0.1, batch_size=5, epochs=4, seed=0)
    _, hist = train(cfg, ds, ds, Arch.logistic(2), on_step=lambda t, th: iterates.append(th.copy()))
    assert np.max(np.abs(hist.theta_bar - np.mean(iterates, axis=0))) <= 1e-9
    for c in hist.checkpoints:
        assert np.max(np.abs(c.theta_bar - np.mean(iterates[: c.step], axis=0))) <= 1e-9


def test_group_dro_improves_worst_group_train_loss():
    arch = Arch.logistic(2)
    for seed in range(5):
        ds = skewed_convex_data(seed)
        common = dict(eta_theta=0.05, momentum=0.9, batch_size=20, epochs=60, seed=seed)
        erm, _ = train(OptimizerConfig(mode="erm", **common), ds, None, arch)
        dro, _ = train(OptimizerConfig(mode="group_dro", eta_q=0.05, **common), ds, None, arch)
        assert worst_group_risk(dro, ds).value <= worst_group_risk(erm, ds).value


def test_history_csv_and_summary():
    ds = skewed_convex_data(2, sizes=(12, 8))
    cfg = OptimizerConfig(batch_size=4, epochs=3, eta_theta=0.1)
    _, hist = train(cfg, ds, ds, Arch.logistic(2), eval_sets={"test": ds})
    lines = hist.to_csv().splitlines()
    assert lines[0] == "checkpoint,split,group,loss,acc,q_g"
    assert len(lines) == 1 + 3 * 3 * 2
    summary = hist.summary()
    assert len(summary["checkpoints"]) == 3
    assert "worst_group_val_acc" in summary["checkpoints"][0]
    assert summary["best_checkpoint"] == early_stop_select(hist)
    for c in hist.checkpoints:
        assert abs(c.q.sum() - 1) <= 1e-9


def test_diverging_run_raises_numerical_error():
    ds = skewed_convex_data(0, sizes=(10, 10))
    cfg = OptimizerConfig(eta_theta=1e200, momentum=0.0, batch_size=5, epochs=5)
    with pytest.raises(NumericalError) as info:
        train(cfg, ds, ds, Arch.mlp1(2, 3))
    assert "epoch" in info.value.diagnostics


# early stopping


def history_from(val_worst):
    cps = []
    for i, w in enumerate(val_worst):
        stats = GroupStats(np.zeros(2), np.array([1.0, w]))
        cps.append(Checkpoint(i, i + 1, i + 1, np.array([0.5, 0.5]), {"train": stats, "val": stats}))
    return TrainHistory(cps)


@pytest.mark.parametrize(
    "series, index",
    [((0.3, 0.7, 0.5), 1), ((0.1, 0.2, 0.3, 0.4), 3), ((0.5, 0.5, 0.5), 0), ((0.6, 0.8, 0.7), 1)],
)
def test_early_stop_examples(series, index):
    assert early_stop_select(history_from(series)) == index


def test_early_stop_needs_val_metrics():
    hist = history_from([0.5])
    del hist.checkpoints[0].splits["val"]
    with pytest.raises(InvalidArgument):
        early_stop_select(hist)
    with pytest.raises(InvalidArgument):
        early_stop_select(TrainHistory())
