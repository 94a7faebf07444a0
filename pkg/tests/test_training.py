import math

import numpy as np
import pytest

from deq_unmix.data import SceneSpec, synth_scene
from deq_unmix.equilibrium import EquilibriumLayer, equilibrium_step
from deq_unmix.errors import ConfigError
from deq_unmix.implicit import reconstruct, total_loss
from deq_unmix.training import (
    SAMSON, SYNTHETIC_15DB, SYNTHETIC_30DB, MemoryLedger, OptimizerState, TrainConfig,
    adam_step, collect_unrolled_grads, deq_step, initialize, layer_views, ledger_measure,
    param_count, train_deq, train_unrolled, unrolled_gradients, unrolled_params,
)

from conftest import fd_directional, rel_err


def test_adam_first_step_is_lr_times_sign():
    p = {"x": np.array([1.0, -2.0, 0.5])}
    g = {"x": np.array([3.0, -1e-3, 40.0])}
    adam_step(p, g, OptimizerState(), {"W": 0.1, "other": 0.01}, {"W": 0.0, "other": 0.0})
    np.testing.assert_allclose(p["x"], [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], rtol=1e-6)


def test_adam_matches_reference_sequence(rng):
    # scalar reference recursion written out independently
    lr, wd, b1, b2, eps = 0.05, 0.1, 0.9, 0.999, 1e-8
    x_ref, m, v = 2.0, 0.0, 0.0
    p = {"other": np.array([2.0])}
    st = OptimizerState()
    for t in range(1, 8):
        g = float(rng.standard_normal())
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x_ref = x_ref - lr * wd * x_ref - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        adam_step(p, {"other": np.array([g])}, st, {"W": 1.0, "other": lr}, {"W": 0.0, "other": wd})
    assert p["other"][0] == pytest.approx(x_ref, rel=1e-12)


def test_adam_groups_and_clamp():
    p = {"W": np.array([0.001, 0.5]), "conv1_w": np.array([0.001])}
    g = {"W": np.array([1.0, 1.0]), "conv1_w": np.array([1.0])}
    adam_step(p, g, OptimizerState(), {"W": 0.01, "other": 0.01}, {"W": 0.0, "other": 0.0})
    assert p["W"][0] == 0.0 and p["W"][1] == pytest.approx(0.49)
    assert p["conv1_w"][0] == pytest.approx(-0.009)


def test_adam_skips_non_finite():
    p = {"W": np.array([1.0]), "b": np.array([1.0])}
    st = OptimizerState()
    ok = adam_step(p, {"W": np.array([np.nan]), "b": np.array([1.0])}, st,
                   {"W": 0.1, "other": 0.1}, {"W": 0, "other": 0})
    assert not ok and st.step == 0
    assert p["W"][0] == 1.0 and p["b"][0] == 1.0


def test_presets_match_reported_settings():
    c30 = TrainConfig(**SYNTHETIC_30DB)
    assert (c30.lam0, c30.k_max, c30.eta, c30.alpha, c30.lr, c30.lr_w, c30.gamma) == (0.01, 10, 0.04, 1.0, 0.01, 0.005, 0.8)
    c15 = TrainConfig(**SYNTHETIC_15DB)
    assert (c15.lr_w, c15.gamma) == (0.003, 0.9)
    s = TrainConfig(**SAMSON)
    assert (s.lam0, s.eta, s.lr, s.lr_w, s.weight_decay, s.gamma, s.alpha) == (0.1, 0.01, 0.01, 0.006, 1e-5, 1.0, 0.1)


def test_config_round_trip_and_validation():
    cfg = TrainConfig(epochs=3, lr=0.02)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)


def small_scene(seed=0, h=6, L=10, R=3):
    return synth_scene(SceneSpec(h=h, w=h, L=L, R=R, seed=seed, corr_length=2.0))


def test_single_epoch_changes_params():
    ds = small_scene()
    cfg = TrainConfig(epochs=1, channels=4)
    _, _, layer0 = initialize(ds.y, 3, cfg)
    rep = train_deq(ds.y, 3, cfg)
    assert len(rep.loss_curve) == 1 and math.isfinite(rep.loss_curve[0])
    changed = [k for k in layer0.params if not np.array_equal(layer0.params[k], rep.params[k])]
    assert "W" in changed and "conv1_w" in changed
    assert np.all(rep.abundances >= 0)
    np.testing.assert_allclose(rep.abundances.sum(-1), 1.0, atol=1e-10)


def test_training_deterministic():
    ds = small_scene(seed=3)
    cfg = TrainConfig(epochs=2, channels=4)
    a, b = train_deq(ds.y, 3, cfg), train_deq(ds.y, 3, cfg)
    assert a.loss_curve == b.loss_curve
    np.testing.assert_array_equal(a.abundances, b.abundances)


def test_short_training_lowers_loss():
    ds = small_scene(seed=1, h=8, L=16)
    rep = train_deq(ds.y, 3, TrainConfig(epochs=15, channels=4, lr=0.001, lr_w=0.001))
    assert rep.loss_curve[-1] < rep.loss_curve[0]


@pytest.mark.parametrize("share", [True, False])
def test_unrolled_gradients_fd(share):
    ds = small_scene(h=4, L=6)
    cfg = TrainConfig(channels=4, lam0=2.0)
    y, a0, layer = initialize(ds.y, 3, cfg)
    params = unrolled_params(layer, 2, share, np.random.default_rng(1))

    def loss_of(p):
        a = a0
        for lay in layer_views(p, 2, share, cfg.eta, cfg.gamma):
            a = equilibrium_step(a, y, lay)
        return total_loss(y, reconstruct(a, p["W"]), 1.0)[0].total

    layers = layer_views(params, 2, share, cfg.eta, cfg.gamma)
    _, per_layer, _, direct = unrolled_gradients(layers, a0, y, 1.0)
    grads = collect_unrolled_grads(per_layer, direct, share)
    assert set(grads) == set(params)
    rng = np.random.default_rng(2)
    keys = ["W", "conv1_w", "head_b"] if share else ["W", "0.conv1_w", "1.head_b", "1.conv2_w"]
    for key in keys:
        d = rng.standard_normal(params[key].shape)

        def f(x, key=key):
            q = dict(params)
            q[key] = x
            return loss_of(q)
        assert rel_err(np.sum(grads[key] * d), fd_directional(f, params[key], d)) < 1e-5, key


def test_param_count_relation():
    layer = EquilibriumLayer.create(np.random.default_rng(0).random((20, 4)), channels=8,
                                    rng=np.random.default_rng(0))
    shared = unrolled_params(layer, 10, True, np.random.default_rng(1))
    unshared = unrolled_params(layer, 10, False, np.random.default_rng(1))
    per_layer = param_count(shared) - shared["W"].size
    assert param_count(unshared) == 10 * per_layer + shared["W"].size


def test_unshared_layers_independent():
    layer = EquilibriumLayer.create(np.random.default_rng(0).random((8, 3)), channels=4,
                                    rng=np.random.default_rng(0))
    p = unrolled_params(layer, 3, False, np.random.default_rng(1))
    assert not np.array_equal(p["0.conv1_w"], p["1.conv1_w"])
    np.testing.assert_array_equal(p["0.conv1_w"], layer.params["conv1_w"])


def test_memory_ledger_phases():
    led = MemoryLedger()
    with led.phase("a"):
        led.retain(10)
        led.retain(5)
        led.release(15)
    led.retain(3)
    assert led.peak == 15 and led.current == 3 and led.phases["a"] == 15


def ledger_peaks(k_values, share=True):
    ds = small_scene(h=8, L=12, R=3)
    out = {}
    for k in k_values:
        cfg = TrainConfig(channels=4, k_max=k, tol=1e-12, t_max=k)
        y, a0, layer = initialize(ds.y, 3, cfg)
        deq = ledger_measure(lambda led: deq_step(layer, a0, y, cfg, led)).peak
        layers = layer_views(layer.params, k, share, cfg.eta, cfg.gamma)
        unr = ledger_measure(lambda led: unrolled_gradients(layers, a0, y, cfg.alpha, led)).peak
        out[k] = (deq, unr)
    return out


def test_ledger_deq_flat_unroll_grows():
    peaks = ledger_peaks([5, 20])
    d5, u5 = peaks[5]
    d20, u20 = peaks[20]
    assert abs(d20 - d5) / d5 < 0.05
    assert u20 >= 3 * u5 and u20 >= 3 * d20


def test_train_unrolled_runs():
    ds = small_scene()
    rep = train_unrolled(ds.y, 3, TrainConfig(epochs=2, channels=4), share_params=False, k_layers=3)
    assert rep.method == "unroll" and len(rep.loss_curve) == 2
    assert any(k.startswith("2.") for k in rep.params)
    with pytest.raises(ConfigError):
        train_unrolled(ds.y, 3, TrainConfig(epochs=1, channels=4), k_layers=0)
