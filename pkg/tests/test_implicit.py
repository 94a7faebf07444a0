import numpy as np
import pytest

from deq_unmix.equilibrium import EquilibriumLayer, SolverConfig, solve_fixed_point, step_forward
from deq_unmix.errors import BackwardError, DimensionError, DomainError
from deq_unmix.implicit import (
    implicit_gradients, loss_re, loss_sad, neumann_series, neumann_vjp, param_gradients,
    reconstruct, total_loss,
)
from deq_unmix.training import collect_unrolled_grads, layer_views, unrolled_gradients

from conftest import fd_directional, rel_err


def test_reconstruct_pure_pixel(rng):
    W = rng.random((7, 3))
    a = np.zeros((2, 2, 3))
    a[..., 1] = 1.0
    np.testing.assert_allclose(reconstruct(a, W), np.broadcast_to(W[:, 1], (2, 2, 7)))


def test_loss_re_values():
    y = np.zeros((1, 1, 2))
    assert loss_re(y, y)[0] == 0.0
    assert loss_re(y, np.array([[[3.0, 4.0]]]))[0] == pytest.approx(25.0)
    with pytest.raises(DimensionError):
        loss_re(y, np.zeros((1, 1, 3)))


def test_loss_sad_values(rng):
    y = rng.random((2, 3, 5)) + 0.1
    assert loss_sad(y, y)[0] == pytest.approx(0.0, abs=1e-12)
    assert loss_sad(y, 3.7 * y)[0] == pytest.approx(0.0, abs=1e-12)
    e = np.zeros((1, 1, 2))
    e[..., 0] = 1
    f = np.zeros((1, 1, 2))
    f[..., 1] = 1
    assert loss_sad(e, f)[0] == pytest.approx(np.pi / 2, rel=1e-12)


def test_loss_sad_zero_pixel_names_location(rng):
    y = rng.random((3, 3, 4))
    yhat = y.copy()
    yhat[2, 1] = 0
    with pytest.raises(DomainError, match=r"\(2, 1\)"):
        loss_sad(y, yhat)


@pytest.mark.parametrize("fn", [loss_re, loss_sad, lambda y, x: total_loss(y, x, 2.5)])
def test_loss_gradients_fd(rng, fn):
    y = rng.random((3, 4, 6)) + 0.1
    yhat = rng.random((3, 4, 6)) + 0.1
    _, g = fn(y, yhat)
    val = lambda x: fn(y, x)[0].total if hasattr(fn(y, x)[0], "total") else fn(y, x)[0]
    d = rng.standard_normal(y.shape)
    assert rel_err(np.sum(g * d), fd_directional(val, yhat, d)) < 1e-6


def test_total_loss_linear_in_alpha(rng):
    y = rng.random((2, 2, 5)) + 0.1
    yhat = rng.random((2, 2, 5)) + 0.1
    l1, _ = total_loss(y, yhat, 1.0)
    l3, _ = total_loss(y, yhat, 3.0)
    assert l3.total - l1.total == pytest.approx(2 * l1.re_component, rel=1e-12)
    assert l1.sad_component == l3.sad_component


def contractive(rng, n, norm):
    J = rng.standard_normal((n, n))
    return J * (norm / np.linalg.norm(J, 2))


def test_neumann_linear_matches_dense_solve(rng):
    J = contractive(rng, 20, 0.85)
    g = rng.standard_normal(20)
    state = neumann_series(lambda v: J.T @ v, g, t_max=500, tol_b=1e-12)
    exact = np.linalg.solve(np.eye(20) - J.T, g)
    assert np.linalg.norm(state.v - exact) / np.linalg.norm(exact) < 1e-6


def test_neumann_terms_decay_geometrically(rng):
    J = contractive(rng, 10, 0.5)
    state = neumann_series(lambda v: J.T @ v, rng.standard_normal(10), t_max=30, tol_b=0.0)
    t = np.array(state.term_norms)
    assert np.all(t[1:] <= 0.5 * t[:-1] * (1 + 1e-12))


def test_neumann_zero_jacobian_and_zero_grad(rng):
    g = rng.standard_normal(6)
    state = neumann_series(lambda v: np.zeros_like(v), g)
    np.testing.assert_array_equal(state.v, g)
    assert state.t_used == 1
    zero = neumann_series(lambda v: v, np.zeros(6))
    np.testing.assert_array_equal(zero.v, 0.0)
    assert zero.t_used == 0


def test_neumann_divergence(rng):
    g = rng.standard_normal(4)
    with pytest.raises(BackwardError):
        neumann_series(lambda v: 2.0 * v, g, t_max=20)
    state = neumann_series(lambda v: 2.0 * v, g, t_max=20, on_divergence="truncate")
    assert state.diverged
    np.testing.assert_allclose(state.v, g)


def test_neumann_respects_t_max(rng):
    J = contractive(rng, 5, 0.99)
    state = neumann_series(lambda v: J.T @ v, rng.standard_normal(5), t_max=3, tol_b=0.0)
    assert state.t_used == 4


def tiny_problem(seed=0, h=6, L=8, R=3, C=4, lam0=0.05):
    rng = np.random.default_rng(seed)
    W = rng.random((L, R)) + 0.2
    a_true = rng.dirichlet(np.ones(R), size=(h, h))
    y = reconstruct(a_true, W) + 0.01 * rng.standard_normal((h, h, L))
    layer = EquilibriumLayer.create(W, lam0=lam0, eta=0.04, gamma=0.8, channels=C, rng=rng)
    return layer, np.full((h, h, R), 1.0 / R), y


def test_param_gradients_zero_adjoint():
    layer, a0, y = tiny_problem()
    grads = param_gradients(layer, a0, y, np.zeros_like(a0))
    assert set(grads) == set(layer.params)
    for g in grads.values():
        assert not np.any(g)


def test_neumann_vjp_on_layer_matches_dense():
    layer, a0, y = tiny_problem(h=3, L=5, R=2)
    a_star, _ = solve_fixed_point(a0, y, layer, SolverConfig(k_max=300, tol=1e-13))
    n = a_star.size
    J = np.empty((n, n))
    eps = 1e-6
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        e = e.reshape(a_star.shape)
        J[:, i] = ((step_forward(a_star + e, y, layer)[0] - step_forward(a_star - e, y, layer)[0]) / (2 * eps)).ravel()
    g = np.random.default_rng(4).standard_normal(a_star.shape)
    state = neumann_vjp(layer, a_star, y, g, t_max=400, tol_b=1e-13)
    exact = np.linalg.solve(np.eye(n) - J.T, g.ravel())
    assert np.linalg.norm(state.v.ravel() - exact) / np.linalg.norm(exact) < 1e-6


def test_implicit_matches_long_unroll():
    layer, a0, y = tiny_problem()
    cfg = SolverConfig(k_max=400, tol=1e-12)
    a_star, trace = solve_fixed_point(a0, y, layer, cfg)
    assert trace.converged
    _, g_imp, _ = implicit_gradients(layer, a_star, y, 1.0, t_max=400, tol_b=1e-12)
    layers = layer_views(layer.params, 120, True, layer.eta, layer.gamma)
    _, per_layer, _, direct = unrolled_gradients(layers, a0, y, 1.0)
    g_unr = collect_unrolled_grads(per_layer, direct, True)
    for k in layer.params:
        den = max(np.linalg.norm(g_unr[k]), 1e-12)
        assert np.linalg.norm(g_imp[k] - g_unr[k]) / den < 1e-2, k


def test_implicit_total_derivative_fd():
    layer, a0, y = tiny_problem(seed=2, h=4, lam0=4.0)
    cfg = SolverConfig(k_max=500, tol=1e-13)

    def total(lay):
        a, _ = solve_fixed_point(a0, y, lay, cfg)
        return total_loss(y, reconstruct(a, lay.W), 1.0)[0].total

    a_star, _ = solve_fixed_point(a0, y, layer, cfg)
    _, grads, _ = implicit_gradients(layer, a_star, y, 1.0, t_max=500, tol_b=1e-13)
    rng = np.random.default_rng(9)
    for key in ("W", "rho", "conv2_w", "head_b"):
        d = rng.standard_normal(np.shape(layer.params[key]))

        def f(x, key=key):
            lay = layer.copy()
            lay.params[key] = x
            return total(lay)

        fd = fd_directional(f, layer.params[key], d, step=1e-4)
        assert rel_err(np.sum(grads[key] * d), fd) < 1e-2, key
