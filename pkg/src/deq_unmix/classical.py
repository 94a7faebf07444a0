"""Vertex component analysis and fully constrained least squares.

These provide both the initialization of the learned solver (endmembers from
VCA, abundances from FCLS with those endmembers) and the classical baseline
it is compared against.

VCA follows Nascimento & Bioucas-Dias (2005): estimate the SNR, project the
data onto an R-dimensional signal subspace (a projective projection when the
SNR is high, a mean-offset projection onto R-1 principal components padded
with a constant coordinate otherwise), then pick R pixels one at a time by
maximizing the projection onto a random direction orthogonal to the span of
the pixels already picked. Unlike the reference code, which returns the
denoised projections of the selected pixels, :func:`vca` returns the observed
spectra themselves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ExtractionError
from .tensor import project_simplex

log = logging.getLogger(__name__)


@dataclass
class VcaResult:
    endmembers: np.ndarray
    indices: np.ndarray
    snr: float


@dataclass
class FclsResult:
    abundances: np.ndarray
    residuals: np.ndarray
    fallbacks: int = 0


def _estimate_snr(Y, mean, xp, R):
    L, N = Y.shape
    p_y = float(np.sum(Y * Y)) / N
    p_x = float(np.sum(xp * xp)) / N + float(mean @ mean)
    denom = p_y - p_x
    num = p_x - R / L * p_y
    if denom <= 0 or num <= 0:
        return math.inf if denom <= 0 else -math.inf
    return 10.0 * math.log10(num / denom)


def vca(y, R, rng=None, snr_input=None):
    """Extract ``R`` endmembers from a ``(h, w, L)`` cube.

    Returns a :class:`VcaResult` whose columns are observed pixel spectra.
    ``rng`` drives the random search directions; a fixed generator state
    makes the selected indices reproducible.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    y = np.asarray(y, dtype=float)
    if y.ndim != 3:
        raise DimensionError(f"expected an (h, w, L) cube, got shape {y.shape}")
    L = y.shape[2]
    Y = y.reshape(-1, L).T
    N = Y.shape[1]
    if not 1 <= R <= min(L, N):
        raise DimensionError(f"cannot extract {R} endmembers from {N} pixels with {L} bands")

    if R == 1:
        u, _, _ = np.linalg.svd(Y, full_matrices=False)
        idx = np.array([int(np.argmax(np.abs(u[:, 0] @ Y)))])
        return VcaResult(Y[:, idx].copy(), idx, math.nan)

    mean = Y.mean(axis=1)
    Yc = Y - mean[:, None]
    Ud, sv, _ = np.linalg.svd(Yc @ Yc.T / N)
    Ud = Ud[:, :R]
    x_p = Ud.T @ Yc
    snr = _estimate_snr(Y, mean, x_p, R) if snr_input is None else float(snr_input)
    snr_th = 15.0 + 10.0 * math.log10(R)

    if snr < snr_th:
        d = R - 1
        if sv[d - 1] <= 1e-12 * max(sv[0], 1e-300):
            raise ExtractionError(f"data spans fewer than {R - 1} centered dimensions (singular values {sv[:R]})")
        x = x_p[:d]
        c = float(np.max(np.linalg.norm(x, axis=0)))
        proj = np.vstack([x, np.full((1, N), c)])
    else:
        Ud, sv, _ = np.linalg.svd(Y @ Y.T / N)
        if sv[R - 1] <= 1e-12 * max(sv[0], 1e-300):
            raise ExtractionError(f"data rank is below {R} (singular values {sv[:R]})")
        Ud = Ud[:, :R]
        xr = Ud.T @ Y
        u = xr.mean(axis=1)
        scale = u @ xr
        if np.any(np.abs(scale) < 1e-12):
            raise ExtractionError("projective normalization hit a pixel orthogonal to the mean direction")
        proj = xr / scale

    indices = np.zeros(R, dtype=np.int64)
    A = np.zeros((R, R))
    A[-1, 0] = 1.0
    for i in range(R):
        wv = rng.random(R)
        f = wv - A @ (np.linalg.pinv(A) @ wv)
        nf = np.linalg.norm(f)
        if nf < 1e-12:
            raise ExtractionError(f"no direction orthogonal to the first {i} endmembers")
        v = (f / nf) @ proj
        indices[i] = int(np.argmax(np.abs(v)))
        A[:, i] = proj[:, indices[i]]
    if np.linalg.matrix_rank(A) < R:
        raise ExtractionError(f"selected pixels {indices.tolist()} are affinely dependent")
    return VcaResult(Y[:, indices].copy(), indices, snr)


def nnls_gram(G, c, max_iter, tol=1e-10):
    """Active-set nonnegative least squares from the normal equations.

    Minimizes ``x^T G x / 2 - c^T x`` over ``x >= 0`` (``G = A^T A``,
    ``c = A^T b``). Returns ``(x, converged)``; ``tol`` is applied to the
    dual variables relative to ``max|c|``.
    """
    n = G.shape[0]
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    thresh = tol * max(1.0, float(np.max(np.abs(c))))
    wd = c - G @ x
    steps = 0
    while (~passive).any() and np.max(np.where(passive, -np.inf, wd)) > thresh:
        j = int(np.argmax(np.where(passive, -np.inf, wd)))
        passive[j] = True
        while True:
            steps += 1
            if steps > max_iter:
                return x, False
            s = np.zeros(n)
            idx = np.flatnonzero(passive)
            s[idx] = np.linalg.solve(G[np.ix_(idx, idx)], c[idx])
            if np.all(s[idx] > 0):
                break
            neg = passive & (s <= 0)
            alpha = np.min(x[neg] / (x[neg] - s[neg]))
            x = x + alpha * (s - x)
            passive &= x > 1e-15
            x[~passive] = 0.0
        x = s
        wd = c - G @ x
    return x, True


def fcls(y, m, delta=1e-3, kkt_tol=1e-10):
    """Per-pixel abundances under nonnegativity and sum-to-one.

    Solves NNLS on ``[M; 1^T / delta] a ~ [y; 1 / delta]`` for every pixel
    and renormalizes the result to sum exactly to one. If the active-set
    loop exceeds ``3 R^2`` steps the pixel falls back to the simplex
    projection of its unconstrained least-squares solution.
    """
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    if y.ndim != 3 or m.ndim != 2 or m.shape[0] != y.shape[2]:
        raise DimensionError(f"cube {y.shape} and endmembers {m.shape} are inconsistent")
    h, w, L = y.shape
    R = m.shape[1]
    if np.linalg.matrix_rank(m) < R:
        raise DimensionError("endmember matrix is not full column rank")
    Aug = np.vstack([m, np.full((1, R), 1.0 / delta)])
    G = Aug.T @ Aug
    Y = y.reshape(-1, L)
    C = Y @ m + 1.0 / delta ** 2
    out = np.empty((Y.shape[0], R))
    fallbacks = 0
    cap = 3 * R * R
    for k in range(Y.shape[0]):
        a, ok = nnls_gram(G, C[k], cap, kkt_tol)
        if not ok:
            fallbacks += 1
            a = project_simplex(np.linalg.lstsq(Aug, np.append(Y[k], 1.0 / delta), rcond=None)[0])
        s = a.sum()
        out[k] = a / s if s > 0 else np.full(R, 1.0 / R)
    if fallbacks:
        log.warning("FCLS: %d pixel(s) hit the active-set cap and were projected", fallbacks)
    resid = np.linalg.norm(out @ m.T - Y, axis=1)
    return FclsResult(out.reshape(h, w, R), resid.reshape(h, w), fallbacks)
