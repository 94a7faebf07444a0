"""The learned proximal-gradient layer and its forward fixed-point solvers.

One application of the layer maps an abundance tensor ``a`` (h, w, R) to

    softmax_gamma( ST_{eta*lam}( a - eta * G(a x3 W, y) x3 W^T ) )

where ``G`` is a small convolutional network standing in for the gradient of
the data-fidelity term. The solvers iterate this map to a fixed point, with
plain Picard steps or with Anderson mixing of the pre-softmax logits.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, SolverError
from .tensor import least_squares_solve, mode3_product, mode3_product_adjoint

THETA_KEYS = (
    "conv1_w", "conv1_b", "att1_w1", "att1_w2", "ln_gain", "ln_offset",
    "conv2_w", "conv2_b", "att2_w1", "att2_w2", "head_w", "head_b",
)


# ---------------------------------------------------------------------------
# G_theta
# ---------------------------------------------------------------------------

def _xavier(rng, shape, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_gtheta(bands, channels=16, ratio=4, rng=None, dtype=np.float64):
    """Xavier-uniform initialization of the convolutional operator.

    Biases start at zero, the layer-norm affine at identity.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    hidden = ad.check_attention_ratio(channels, ratio)
    C, L = channels, bands
    p = {
        "conv1_w": _xavier(rng, (C, 2, 3, 3, 3), 2 * 27, C * 27, dtype),
        "conv1_b": np.zeros(C, dtype),
        "att1_w1": _xavier(rng, (hidden, C), C, hidden, dtype),
        "att1_w2": _xavier(rng, (C, hidden), hidden, C, dtype),
        "ln_gain": np.ones(C, dtype),
        "ln_offset": np.zeros(C, dtype),
        "conv2_w": _xavier(rng, (C, C, 3, 3, 3), C * 27, C * 27, dtype),
        "conv2_b": np.zeros(C, dtype),
        "att2_w1": _xavier(rng, (hidden, C), C, hidden, dtype),
        "att2_w2": _xavier(rng, (C, hidden), hidden, C, dtype),
        "head_w": _xavier(rng, (L, C * L, 3, 3), C * L * 9, L * 9, dtype),
        "head_b": np.zeros(L, dtype),
    }
    return p


def gtheta_forward(p, recon, y, save=False):
    """Apply the operator to a reconstruction and the observed cube.

    Both inputs are ``(h, w, L)``. The output is ``(recon - y)`` plus the
    network branch. With ``save=True`` the intermediates needed by
    :func:`gtheta_vjp` are returned alongside.
    """
    if recon.shape != y.shape:
        raise DimensionError(f"reconstruction {recon.shape} and cube {y.shape} differ")
    h, w, L = y.shape
    x0 = np.stack([recon.transpose(2, 0, 1), y.transpose(2, 0, 1)])
    z1 = ad.conv3d_forward(x0, p["conv1_w"], p["conv1_b"])
    a1 = ad.channel_attention_forward(z1, p["att1_w1"], p["att1_w2"])
    n1, xhat1, inv1 = ad.layer_norm_forward(a1, p["ln_gain"], p["ln_offset"], return_stats=True)
    r1 = ad.relu_forward(n1)
    z2 = ad.conv3d_forward(r1, p["conv2_w"], p["conv2_b"])
    a2 = ad.channel_attention_forward(z2, p["att2_w1"], p["att2_w2"])
    r2 = ad.relu_forward(a2)
    C = r2.shape[0]
    head = ad.conv2d_forward(r2.reshape(C * L, h, w), p["head_w"], p["head_b"])
    out = (recon - y) + head.transpose(1, 2, 0)
    if not save:
        return out, None
    cache = dict(x0=x0, z1=z1, a1=a1, n1=n1, xhat1=xhat1, inv1=inv1, r1=r1, z2=z2, a2=a2, r2=r2)
    return out, cache


def gtheta_vjp(p, cache, gout, need_params=True):
    """Return ``(grecon, grads)`` for the operator; ``grads`` is None unless requested."""
    h, w, L = gout.shape
    r2 = cache["r2"]
    C = r2.shape[0]
    grecon = gout.copy()
    ghead = np.ascontiguousarray(gout.transpose(2, 0, 1))
    g_r2, ghw, ghb = ad.conv2d_vjp(r2.reshape(C * L, h, w), p["head_w"], ghead, need_params=need_params)
    g_a2 = ad.relu_vjp(cache["a2"], g_r2.reshape(r2.shape))
    g_z2, ga2w1, ga2w2 = ad.channel_attention_vjp(cache["z2"], p["att2_w1"], p["att2_w2"], g_a2, need_params)
    g_r1, gc2w, gc2b = ad.conv3d_vjp(cache["r1"], p["conv2_w"], g_z2, need_params=need_params)
    g_n1 = ad.relu_vjp(cache["n1"], g_r1)
    g_a1, glng, glno = ad.layer_norm_vjp(
        cache["a1"], p["ln_gain"], g_n1, cache["xhat1"], cache["inv1"], need_params
    )
    g_z1, ga1w1, ga1w2 = ad.channel_attention_vjp(cache["z1"], p["att1_w1"], p["att1_w2"], g_a1, need_params)
    g_x0, gc1w, gc1b = ad.conv3d_vjp(cache["x0"], p["conv1_w"], g_z1, need_params=need_params)
    grecon += g_x0[0].transpose(1, 2, 0)
    grads = None
    if need_params:
        grads = {
            "conv1_w": gc1w, "conv1_b": gc1b, "att1_w1": ga1w1, "att1_w2": ga1w2,
            "ln_gain": glng, "ln_offset": glno, "conv2_w": gc2w, "conv2_b": gc2b,
            "att2_w1": ga2w1, "att2_w2": ga2w2, "head_w": ghw, "head_b": ghb,
        }
    return grecon, grads


def gtheta_apply(p, recon, y):
    return gtheta_forward(p, recon, y)[0]


def cache_size(cache):
    """Number of scalars held by a cache dict (nested dicts included)."""
    total = 0
    for v in cache.values():
        if isinstance(v, dict):
            total += cache_size(v)
        elif isinstance(v, np.ndarray):
            total += v.size
    return total


# ---------------------------------------------------------------------------
# the layer
# ---------------------------------------------------------------------------

@dataclass
class EquilibriumLayer:
    """Parameters ``{theta, W, rho}`` plus the fixed step size and temperature.

    The sparsity weight is stored through its softplus preimage ``rho`` so
    that ``lam = softplus(rho)`` stays nonnegative under gradient updates.
    """

    params: dict
    eta: float = 0.04
    gamma: float = 0.8

    def __post_init__(self):
        if self.eta <= 0 or self.gamma <= 0:
            raise ConfigError("eta and gamma must be positive")

    @classmethod
    def create(cls, endmembers, lam0=0.01, eta=0.04, gamma=0.8, channels=16, ratio=4,
               rng=None, dtype=np.float64):
        endmembers = np.asarray(endmembers, dtype=dtype)
        params = init_gtheta(endmembers.shape[0], channels, ratio, rng, dtype)
        params["W"] = endmembers.copy()
        params["rho"] = np.asarray(ad.softplus_inverse(lam0), dtype=dtype)
        return cls(params, eta, gamma)

    @property
    def W(self):
        return self.params["W"]

    @property
    def lam(self):
        return float(ad.softplus(self.params["rho"]))

    @property
    def channels(self):
        return self.params["conv1_w"].shape[0]

    @property
    def theta(self):
        return {k: self.params[k] for k in THETA_KEYS}

    def copy(self):
        return EquilibriumLayer({k: v.copy() for k, v in self.params.items()}, self.eta, self.gamma)


def step_forward(a, y, layer, save=False):
    """One layer application. Returns ``(a_next, logits, cache)``.

    ``logits`` is the pre-softmax value ``gamma * ST(...)``; ``cache`` is None
    unless ``save`` is set.
    """
    p = layer.params
    W = p["W"]
    if a.shape[:2] != y.shape[:2] or a.shape[2] != W.shape[1] or y.shape[2] != W.shape[0]:
        raise DimensionError(f"abundances {a.shape}, cube {y.shape} and W {W.shape} are inconsistent")
    recon = mode3_product(a, W)
    g, gcache = gtheta_forward(p, recon, y, save=save)
    d = mode3_product_adjoint(g, W)
    u = a - layer.eta * d
    t = layer.eta * layer.lam
    z = ad.soft_threshold_forward(u, t)
    logits = layer.gamma * z
    out = ad.softmax_temp_forward(z, layer.gamma)
    if not np.all(np.isfinite(out)):
        raise SolverError("non-finite value in equilibrium step", iterate=a.copy())
    cache = None
    if save:
        cache = dict(a=a, g=g, u=u, p=out, gtheta=gcache)
    return out, logits, cache


def equilibrium_step(a, y, layer):
    """Apply the layer once: the next abundance iterate."""
    return step_forward(a, y, layer)[0]


def step_vjp(layer, cache, gout, need_params=True):
    """Pull ``gout`` (h, w, R) back through one layer application.

    Returns ``(ga, grads)``. ``W`` collects contributions from both of its
    occurrences (inside the operator argument and in the transposed product),
    and ``rho`` is reached through the threshold level and the softplus.
    """
    p = layer.params
    W = p["W"]
    eta = layer.eta
    gz = ad.softmax_temp_vjp(cache["p"], layer.gamma, gout)
    t = eta * layer.lam
    gu, gt = ad.soft_threshold_vjp(cache["u"], t, gz)
    ga = gu.copy()
    gd = -eta * gu
    gg = mode3_product(gd, W)
    grecon, grads = gtheta_vjp(p, cache["gtheta"], gg, need_params=need_params)
    ga += mode3_product_adjoint(grecon, W)
    if not need_params:
        return ga, None
    h, w, R = gd.shape
    a = cache["a"]
    gW = cache["g"].reshape(-1, W.shape[0]).T @ gd.reshape(-1, R)
    gW += grecon.reshape(-1, W.shape[0]).T @ a.reshape(-1, R)
    grads["W"] = gW
    grads["rho"] = np.asarray(eta * gt * float(ad.sigmoid(np.atleast_1d(p["rho"]))[0]), dtype=W.dtype)
    return ga, grads


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

@dataclass
class SolverConfig:
    k_max: int = 10
    tol: float = 1e-3
    anderson_memory: int = 5
    anderson_ridge: float = 1e-4
    damping: float = 1.0

    def __post_init__(self):
        if self.k_max < 1:
            raise ConfigError("k_max must be at least 1")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")
        if not 1 <= self.anderson_memory:
            raise ConfigError("anderson_memory must be at least 1")
        if self.anderson_ridge < 0:
            raise ConfigError("anderson_ridge must be nonnegative")


@dataclass
class SolveTrace:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    converged: bool = False
    mode: str = "anderson"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "residual"])
            for k, r in enumerate(self.residuals, start=1):
                wr.writerow([k, repr(float(r))])


def _anderson_mix(xs, gs, beta, ridge):
    fs = [g - x for x, g in zip(xs, gs)]
    f_k, g_k = fs[-1].reshape(-1), gs[-1].reshape(-1)
    dF = np.stack([(fs[i + 1] - fs[i]).reshape(-1) for i in range(len(fs) - 1)], axis=1)
    dG = np.stack([(gs[i + 1] - gs[i]).reshape(-1) for i in range(len(gs) - 1)], axis=1)
    scale = float(np.sum(dF * dF))
    coef = least_squares_solve(dF, f_k, ridge * scale if scale > 0 else 0.0)
    x_new = g_k - dG @ coef
    if beta != 1.0:
        x_new -= (1.0 - beta) * (f_k - dF @ coef)
    return x_new.reshape(gs[-1].shape)


def fixed_point_iterate(step_pre: Callable, project: Callable, a0, cfg: SolverConfig,
                        mode="anderson", lift: Callable | None = None, ledger=None):
    """Generic solver skeleton shared by the layer and by test fixtures.

    ``step_pre(a)`` maps a visible iterate to the pre-constraint image of the
    map, ``project(x)`` maps pre-constraint values back to visible iterates
    (so the full map is ``project(step_pre(a))``), and ``lift(a)`` supplies a
    pre-constraint representative of the starting point for the Anderson
    history. Returns ``(a, trace)``.
    """
    if mode not in ("picard", "anderson"):
        raise ConfigError(f"unknown solver mode {mode!r}")
    trace = SolveTrace(mode=mode)
    a = a0
    m = cfg.anderson_memory
    xs, gs = deque(maxlen=m), deque(maxlen=m)
    x = lift(a0) if (lift is not None and mode == "anderson") else None
    held = 0
    for k in range(cfg.k_max):
        gx = step_pre(a)
        if mode == "anderson" and x is not None:
            xs.append(x)
            gs.append(gx)
            if ledger is not None:
                new_held = 2 * len(xs) * gx.size
                ledger.retain(new_held - held)
                held = new_held
            if len(xs) >= 2:
                x_new = _anderson_mix(list(xs), list(gs), cfg.damping, cfg.anderson_ridge)
            else:
                x_new = cfg.damping * gx + (1.0 - cfg.damping) * x
        else:
            x_new = gx
        a_new = project(x_new)
        if not np.all(np.isfinite(a_new)):
            raise SolverError(f"non-finite iterate at iteration {k + 1}", iterate=a.copy(), iteration=k + 1)
        res = float(np.linalg.norm(a_new - a)) / max(float(np.linalg.norm(a)), 1e-12)
        trace.residuals.append(res)
        trace.iterations = k + 1
        a, x = a_new, x_new
        if res < cfg.tol:
            trace.converged = True
            break
    if ledger is not None and held:
        ledger.release(held)
    return a, trace


def solve_fixed_point(a0, y, layer, cfg=None, mode="anderson", ledger=None):
    """Iterate the layer from ``a0`` until the relative step falls below ``cfg.tol``.

    In Anderson mode the mixing acts on the pre-softmax logits and every
    mixed point is mapped back to the simplex by a softmax, so all returned
    and recorded iterates are feasible.
    """
    cfg = cfg or SolverConfig()

    def step_pre(a):
        return step_forward(a, y, layer)[1]

    def project(x):
        return ad.softmax_temp_forward(x, 1.0)

    def lift(a):
        return np.log(np.maximum(a, 1e-12))

    return fixed_point_iterate(step_pre, project, a0, cfg, mode, lift, ledger)
