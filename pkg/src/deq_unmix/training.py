"""Optimizer, training loops and the retained-activation ledger.

Three training modes share the same layer:

* ``train_deq`` solves for the fixed point without recording anything and
  differentiates implicitly (Neumann adjoint), so the retained state does
  not depend on the iteration count.
* ``train_unrolled`` with ``share_params=True`` runs ``k`` Picard steps of
  one layer and backpropagates through a tape holding every step's cache.
* ``train_unrolled`` with ``share_params=False`` does the same with an
  independent copy of ``theta`` and ``rho`` per step; ``W`` stays shared.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .classical import fcls, vca
from .equilibrium import (
    THETA_KEYS,
    EquilibriumLayer,
    SolverConfig,
    cache_size,
    init_gtheta,
    solve_fixed_point,
    step_forward,
    step_vjp,
)
from .errors import BackwardError, ConfigError, UnmixError
from .implicit import implicit_gradients, reconstruct, total_loss
from .tensor import make_rng, mode3_product_adjoint

log = logging.getLogger(__name__)

# RNG streams derived from the run seed
_STREAM_VCA, _STREAM_INIT = 0, 1


class MemoryLedger:
    """Counts scalars held alive by tapes, caches and solver histories."""

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.phases = {}
        self._phase = None

    def retain(self, n):
        self.current += int(n)
        if self.current > self.peak:
            self.peak = self.current
        if self._phase is not None and self.current > self.phases[self._phase]:
            self.phases[self._phase] = self.current

    def release(self, n):
        self.current -= int(n)

    def reset(self):
        self.current = 0
        self.peak = 0
        self.phases = {}

    @contextmanager
    def phase(self, name):
        prev = self._phase
        self._phase = name
        self.phases.setdefault(name, self.current)
        try:
            yield self
        finally:
            self._phase = prev


def ledger_measure(step):
    """Run ``step(ledger)`` once on a fresh ledger and return the ledger."""
    ledger = MemoryLedger()
    step(ledger)
    return ledger


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def param_group(name):
    return "W" if name == "W" else "other"


def adam_step(params, grads, state, lrs, weight_decays, nonneg=("W",)):
    """One adaptive-moment step with decoupled weight decay, in place.

    ``lrs`` and ``weight_decays`` map a group name (``"W"`` or ``"other"``) to
    a value. Parameters listed in ``nonneg`` are clamped at zero afterwards.
    Returns False (and leaves everything untouched) if any gradient is
    non-finite.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s; skipping optimizer step", k)
            return False
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        grp = param_group(k.rsplit(".", 1)[-1])
        lr, wd = lrs[grp], weight_decays[grp]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if wd:
            p -= lr * wd * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if k in nonneg:
            np.maximum(p, 0.0, out=p)
    return True


# ---------------------------------------------------------------------------
# configuration and reports
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    lr_w: float = 0.005
    weight_decay: float = 1e-5
    weight_decay_w: float = 1e-5
    alpha: float = 1.0
    gamma: float = 0.8
    eta: float = 0.04
    lam0: float = 0.01
    seed: int = 0
    channels: int = 16
    attention_ratio: int = 4
    k_max: int = 10
    tol: float = 1e-3
    anderson_memory: int = 5
    anderson_ridge: float = 1e-4
    damping: float = 1.0
    solver_mode: str = "anderson"
    t_max: int = 10
    tol_b: float = 1e-4
    fcls_delta: float = 1e-3
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.lr <= 0 or self.lr_w <= 0:
            raise ConfigError("learning rates must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def solver(self):
        return SolverConfig(self.k_max, self.tol, self.anderson_memory, self.anderson_ridge, self.damping)

    @property
    def lrs(self):
        return {"W": self.lr_w, "other": self.lr}

    @property
    def decays(self):
        return {"W": self.weight_decay_w, "other": self.weight_decay}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**known)


# Settings reported for the synthetic scenes and the Samson scene.
SYNTHETIC_30DB = dict(lam0=0.01, k_max=10, eta=0.04, alpha=1.0, weight_decay=1e-5,
                      weight_decay_w=1e-5, lr=0.01, lr_w=0.005, gamma=0.8)
SYNTHETIC_15DB = dict(SYNTHETIC_30DB, lr_w=0.003, gamma=0.9)
SAMSON = dict(lam0=0.1, k_max=10, eta=0.01, lr=0.01, lr_w=0.006, weight_decay=1e-5,
              weight_decay_w=1e-5, gamma=1.0, alpha=0.1)
APEX = dict(lam0=0.1, k_max=10, eta=0.01, lr=0.006, lr_w=0.01, weight_decay=1e-3,
            weight_decay_w=0.0, gamma=1.2, alpha=10.0)


@dataclass
class TrainReport:
    method: str
    loss_curve: list
    params: dict
    abundances: np.ndarray
    endmembers: np.ndarray
    init_abundances: np.ndarray
    init_endmembers: np.ndarray
    step_seconds: list
    ledger_peaks: list
    iterations: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def summary(self):
        return {
            "method": self.method,
            "epochs": len(self.loss_curve),
            "final_loss": self.loss_curve[-1] if self.loss_curve else None,
            "loss_curve": self.loss_curve,
            "mean_step_seconds": float(np.mean(self.step_seconds)) if self.step_seconds else None,
            "ledger_peak": max(self.ledger_peaks) if self.ledger_peaks else 0,
            "solver_iterations": self.iterations,
            "solver_converged": self.converged,
            "param_count": param_count(self.params),
            "config": self.config,
        }


def param_count(params):
    return int(sum(np.asarray(v).size for v in params.values()))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def initialize(y, R, cfg):
    """VCA endmembers, FCLS abundances and a freshly initialized layer."""
    y = np.asarray(y, dtype=cfg.dtype)
    ext = vca(y, R, make_rng(cfg.seed, _STREAM_VCA))
    a0 = fcls(y, ext.endmembers, delta=cfg.fcls_delta).abundances.astype(cfg.dtype)
    layer = EquilibriumLayer.create(
        ext.endmembers, cfg.lam0, cfg.eta, cfg.gamma, cfg.channels, cfg.attention_ratio,
        make_rng(cfg.seed, _STREAM_INIT), np.dtype(cfg.dtype),
    )
    return y, a0, layer


# ---------------------------------------------------------------------------
# DEQ training
# ---------------------------------------------------------------------------

def deq_step(layer, a0, y, cfg, ledger=None):
    """Forward solve plus implicit backward. Returns ``(loss, grads, trace, a_star)``."""
    with _phase(ledger, "forward"):
        a_star, trace = solve_fixed_point(a0, y, layer, cfg.solver, cfg.solver_mode, ledger)
    with _phase(ledger, "backward"):
        try:
            loss, grads, _ = implicit_gradients(layer, a_star, y, cfg.alpha, cfg.t_max, cfg.tol_b, ledger)
        except BackwardError as exc:
            log.warning("%s; falling back to truncated accumulation", str(exc))
            loss, grads, _ = implicit_gradients(
                layer, a_star, y, cfg.alpha, cfg.t_max, cfg.tol_b, ledger, on_divergence="truncate"
            )
    return loss, grads, trace, a_star


@contextmanager
def _phase(ledger, name):
    if ledger is None:
        yield
    else:
        with ledger.phase(name):
            yield


def train_deq(y, R, cfg: TrainConfig, init=None) -> TrainReport:
    """Train the equilibrium unmixer on one cube (unsupervised)."""
    y, a0, layer = init if init is not None else initialize(y, R, cfg)
    m_init = layer.W.copy()
    state = OptimizerState()
    losses, secs, peaks, iters, conv = [], [], [], [], []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        ledger = MemoryLedger()
        try:
            loss, grads, trace, _ = deq_step(layer, a0, y, cfg, ledger)
        except UnmixError as exc:
            raise type(exc)(f"epoch {epoch}: {exc}") from exc
        adam_step(layer.params, grads, state, cfg.lrs, cfg.decays)
        secs.append(time.perf_counter() - t0)
        losses.append(loss.total)
        peaks.append(ledger.peak)
        iters.append(trace.iterations)
        conv.append(trace.converged)
        log.info("deq epoch %d loss %.6g (%d solver iterations)", epoch, loss.total, trace.iterations)
    a_hat, _ = solve_fixed_point(a0, y, layer, cfg.solver, cfg.solver_mode)
    return TrainReport("deq", losses, layer.params, a_hat, layer.W.copy(), a0, m_init,
                       secs, peaks, iters, conv, cfg.to_dict())


# ---------------------------------------------------------------------------
# unrolled baselines
# ---------------------------------------------------------------------------

def layer_views(params, k_layers, share, eta, gamma):
    """Per-step :class:`EquilibriumLayer` views onto a flat parameter dict."""
    if share:
        return [EquilibriumLayer(params, eta, gamma)] * k_layers
    out = []
    for k in range(k_layers):
        p = {n: params[f"{k}.{n}"] for n in THETA_KEYS + ("rho",)}
        p["W"] = params["W"]
        out.append(EquilibriumLayer(p, eta, gamma))
    return out


def unrolled_params(layer, k_layers, share, rng):
    """Flat parameter dict: one layer's worth if shared, else ``k`` copies of theta/rho."""
    if share:
        return {k: v.copy() for k, v in layer.params.items()}
    params = {"W": layer.W.copy()}
    L = layer.W.shape[0]
    ratio = layer.channels // layer.params["att1_w1"].shape[0]
    for k in range(k_layers):
        theta = layer.theta if k == 0 else init_gtheta(L, layer.channels, ratio, rng, layer.W.dtype)
        for n in THETA_KEYS:
            params[f"{k}.{n}"] = theta[n].copy()
        params[f"{k}.rho"] = layer.params["rho"].copy()
    return params


def unrolled_gradients(layers, a0, y, alpha, ledger=None):
    """Backprop through ``len(layers)`` explicit steps from ``a0``.

    Every step's cache is kept on a tape until the backward sweep reaches it.
    Returns ``(loss, grads_per_layer, a_final)``; with shared layers the
    per-layer dicts must be summed by the caller.
    """
    tape = ad.Tape(ledger=ledger)
    per_layer = [None] * len(layers)
    a = a0
    for k, layer in enumerate(layers):
        a, _, cache = step_forward(a, y, layer, save=True)

        def vjp(g, layer=layer, cache=cache, k=k):
            ga, grads = step_vjp(layer, cache, g, need_params=True)
            per_layer[k] = grads
            return ga

        tape.record(f"step{k}", vjp, saved=cache_size(cache), inputs=(k,))
    W = layers[-1].params["W"]
    yhat = reconstruct(a, W)
    loss, g_yhat = total_loss(y, yhat, alpha)
    g_a = mode3_product_adjoint(g_yhat, W)
    tape.backward(g_a)
    R = a.shape[-1]
    direct_w = g_yhat.reshape(-1, W.shape[0]).T @ a.reshape(-1, R)
    return loss, per_layer, a, direct_w


def collect_unrolled_grads(per_layer, direct_w, share):
    if share:
        grads = {k: sum(g[k] for g in per_layer) for k in per_layer[0]}
        grads["W"] = grads["W"] + direct_w
        return grads
    grads = {"W": direct_w + sum(g["W"] for g in per_layer)}
    for k, g in enumerate(per_layer):
        for n, v in g.items():
            if n != "W":
                grads[f"{k}.{n}"] = v
    return grads


def train_unrolled(y, R, cfg: TrainConfig, share_params=True, k_layers=10, init=None) -> TrainReport:
    """Train the unrolled baseline (``Unroll-S`` if shared, ``Unroll`` otherwise)."""
    if k_layers < 1:
        raise ConfigError("k_layers must be at least 1")
    y, a0, layer = init if init is not None else initialize(y, R, cfg)
    m_init = layer.W.copy()
    params = unrolled_params(layer, k_layers, share_params, make_rng(cfg.seed, _STREAM_INIT + 1))
    state = OptimizerState()
    losses, secs, peaks = [], [], []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        ledger = MemoryLedger()
        layers = layer_views(params, k_layers, share_params, cfg.eta, cfg.gamma)
        try:
            loss, per_layer, _, direct_w = unrolled_gradients(layers, a0, y, cfg.alpha, ledger)
        except UnmixError as exc:
            raise type(exc)(f"epoch {epoch}: {exc}") from exc
        grads = collect_unrolled_grads(per_layer, direct_w, share_params)
        adam_step(params, grads, state, cfg.lrs, cfg.decays)
        secs.append(time.perf_counter() - t0)
        losses.append(loss.total)
        peaks.append(ledger.peak)
        log.info("unroll epoch %d loss %.6g", epoch, loss.total)
    layers = layer_views(params, k_layers, share_params, cfg.eta, cfg.gamma)
    a = a0
    for lay in layers:
        a = step_forward(a, y, lay)[0]
    name = "unroll-s" if share_params else "unroll"
    return TrainReport(name, losses, params, a, params["W"].copy(), a0, m_init, secs, peaks,
                       [k_layers] * len(losses), [False] * len(losses), cfg.to_dict())
