"""Losses and the constant-memory implicit backward pass.

The adjoint ``v = (I - J)^{-T} g`` at a fixed point is accumulated as the
Neumann series ``sum_n (J^T)^n g`` using only input-VJPs of one layer
application, linearized once at the fixed point. Parameter cotangents then
need a single parameter-VJP with ``v`` as the output cotangent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import cache_size, step_forward, step_vjp
from .errors import BackwardError, DimensionError, DomainError
from .tensor import mode3_product, mode3_product_adjoint

log = logging.getLogger(__name__)

SAD_CLAMP = 1e-9


@dataclass
class LossValue:
    total: float
    re_component: float
    sad_component: float
    alpha: float


@dataclass
class AdjointState:
    v: np.ndarray
    term_norms: list = field(default_factory=list)
    diverged: bool = False

    @property
    def t_used(self):
        return len(self.term_norms)


def reconstruct(a, w):
    """Cube predicted by abundances ``a`` (h, w, R) and endmembers ``w`` (L, R)."""
    return mode3_product(a, w)


def loss_re(y, yhat):
    """Mean squared reconstruction error per pixel, and its gradient in ``yhat``."""
    if y.shape != yhat.shape:
        raise DimensionError(f"cube shapes differ: {y.shape} vs {yhat.shape}")
    n = y.shape[0] * y.shape[1]
    diff = yhat - y
    return float(np.sum(diff * diff)) / n, (2.0 / n) * diff


def loss_sad(y, yhat):
    """Mean per-pixel spectral angle between ``y`` and ``yhat``, and its gradient.

    The angle itself comes from the half-angle formula, which is exact for
    parallel spectra. For the gradient the cosine is clamped to
    ``[-1 + 1e-9, 1 - 1e-9]``; beyond the clamp the gradient is zero.
    """
    if y.shape != yhat.shape:
        raise DimensionError(f"cube shapes differ: {y.shape} vs {yhat.shape}")
    n = y.shape[0] * y.shape[1]
    ny = np.linalg.norm(y, axis=-1)
    nh = np.linalg.norm(yhat, axis=-1)
    for norms, which in ((ny, "observed"), (nh, "reconstructed")):
        bad = np.argwhere(norms <= 1e-12)
        if bad.size:
            i, j = bad[0]
            raise DomainError(f"{which} pixel ({i}, {j}) has zero norm")
    dot = np.sum(y * yhat, axis=-1)
    cos = dot / (ny * nh)
    lo, hi = -1.0 + SAD_CLAMP, 1.0 - SAD_CLAMP
    cc = np.clip(cos, lo, hi)
    uy = y / ny[..., None]
    uh = yhat / nh[..., None]
    angles = 2.0 * np.arctan2(np.linalg.norm(uy - uh, axis=-1), np.linalg.norm(uy + uh, axis=-1))
    value = float(np.sum(angles)) / n
    inside = (cos > lo) & (cos < hi)
    dcos = np.where(inside, -1.0 / np.sqrt(1.0 - cc * cc), 0.0) / n
    grad = dcos[..., None] * (y / (ny * nh)[..., None] - cos[..., None] * yhat / (nh * nh)[..., None])
    return value, grad


def total_loss(y, yhat, alpha):
    """``alpha * RE + SAD`` with its gradient in ``yhat``."""
    re, g_re = loss_re(y, yhat)
    sad, g_sad = loss_sad(y, yhat)
    return LossValue(alpha * re + sad, re, sad, alpha), alpha * g_re + g_sad


def neumann_series(apply_jt, g, t_max=10, tol_b=1e-4, on_divergence="raise"):
    """Sum ``sum_{n=0}^{t_max} apply_jt^n(g)`` term by term.

    Stops once a new term is below ``tol_b`` relative to the running sum (the
    small term is still added). Three consecutive growing terms raise
    :class:`BackwardError`, or with ``on_divergence="truncate"`` return the
    partial sum that ends at the smallest term seen.
    """
    v = np.zeros_like(g)
    state = AdjointState(v)
    term = g
    growth = 0
    prev = None
    v_keep, n_keep = v.copy(), 0
    for n in range(t_max + 1):
        tn = float(np.linalg.norm(term))
        vn = float(np.linalg.norm(v))
        if tn == 0.0 or (n > 0 and tn <= tol_b * vn):
            v += term
            break
        if prev is not None and tn > prev:
            growth += 1
            if growth >= 3:
                state.diverged = True
                if on_divergence == "raise":
                    raise BackwardError(f"Neumann terms grew for 3 consecutive steps (term {n})")
                log.warning("Neumann series diverging at term %d; truncating after term %d", n, n_keep - 1)
                v = v_keep
                del state.term_norms[n_keep:]
                break
        else:
            growth = 0
        v += term
        state.term_norms.append(tn)
        if prev is None or tn <= prev:
            v_keep, n_keep = v.copy(), n + 1
        prev = tn
        if n == t_max:
            break
        term = apply_jt(term)
    state.v = v
    return state


def neumann_vjp(layer, a_star, y, loss_grad, t_max=10, tol_b=1e-4, ledger=None,
                on_divergence="raise", cache=None):
    """Adjoint ``sum_n (J^T)^n loss_grad`` with ``J`` the layer Jacobian at ``a_star``.

    The layer is linearized once at ``a_star``; each term costs one input-VJP.
    Only that linearization cache, the running sum and the current term are
    held, whatever ``t_max`` or the forward iteration count.
    """
    own_cache = cache is None
    if own_cache:
        _, _, cache = step_forward(a_star, y, layer, save=True)
    held = 2 * loss_grad.size + (cache_size(cache) if own_cache else 0)
    if ledger is not None:
        ledger.retain(held)
    try:
        return neumann_series(
            lambda t: step_vjp(layer, cache, t, need_params=False)[0],
            loss_grad, t_max, tol_b, on_divergence,
        )
    finally:
        if ledger is not None:
            ledger.release(held)


def param_gradients(layer, a_star, y, v_star, cache=None):
    """Parameter cotangents ``(df/dTheta)^T v_star`` from one layer application."""
    if cache is None:
        _, _, cache = step_forward(a_star, y, layer, save=True)
    _, grads = step_vjp(layer, cache, v_star, need_params=True)
    return grads


def implicit_gradients(layer, a_star, y, alpha, t_max=10, tol_b=1e-4, ledger=None,
                       on_divergence="raise"):
    """Loss and full parameter gradient for a solved fixed point.

    ``W`` also receives the direct term from the reconstruction ``a_star x3 W``.
    Returns ``(loss, grads, adjoint_state)``.
    """
    W = layer.params["W"]
    yhat = reconstruct(a_star, W)
    loss, g_yhat = total_loss(y, yhat, alpha)
    g_a = mode3_product_adjoint(g_yhat, W)
    _, _, cache = step_forward(a_star, y, layer, save=True)
    held = cache_size(cache)
    if ledger is not None:
        ledger.retain(held)
    try:
        state = neumann_vjp(layer, a_star, y, g_a, t_max, tol_b, ledger, on_divergence, cache=cache)
        _, grads = step_vjp(layer, cache, state.v, need_params=True)
    finally:
        if ledger is not None:
            ledger.release(held)
    R = a_star.shape[-1]
    grads["W"] = grads["W"] + g_yhat.reshape(-1, W.shape[0]).T @ a_star.reshape(-1, R)
    return loss, grads, state
