"""Dense array kernels shared by the solver, the baselines and the metrics.

Arrays are plain :class:`numpy.ndarray` values. Cubes are stored row-major as
``(h, w, L)`` with the spectral axis last, abundance tensors as ``(h, w, R)``
and endmember matrices as ``(L, R)``.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

DEFAULT_DTYPE = np.float64


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a PCG64 generator for ``(seed, stream)``.

    The same pair always yields the same draw sequence; distinct streams of
    one seed are statistically independent.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def mode3_product(a: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Contract the last axis of ``a`` (h, w, R) with ``m`` (L, R).

    Returns ``out[i, j, l] = sum_r m[l, r] * a[i, j, r]``.
    """
    a = np.asarray(a)
    m = np.asarray(m)
    if a.ndim != 3 or m.ndim != 2:
        raise DimensionError(f"expected a 3-way tensor and a matrix, got {a.shape} and {m.shape}")
    if m.shape[1] != a.shape[2]:
        raise DimensionError(f"matrix has {m.shape[1]} columns but tensor has {a.shape[2]} channels")
    return a @ m.T


def mode3_product_adjoint(g: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`mode3_product` in its tensor argument.

    Returns ``out[i, j, r] = sum_l m[l, r] * g[i, j, l]``.
    """
    g = np.asarray(g)
    m = np.asarray(m)
    if g.ndim != 3 or m.ndim != 2:
        raise DimensionError(f"expected a 3-way tensor and a matrix, got {g.shape} and {m.shape}")
    if m.shape[0] != g.shape[2]:
        raise DimensionError(f"matrix has {m.shape[0]} rows but tensor has {g.shape[2]} bands")
    return g @ m


def least_squares_solve(A: np.ndarray, b: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Solve ``argmin_x ||A x - b||^2 + ridge * ||x||^2``.

    With ``ridge == 0`` the problem is handled by an SVD-based solver, so a
    rank-deficient ``A`` returns the minimum-norm solution. A positive ridge
    is added to the normal equations, which are then always nonsingular.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    n, k = A.shape
    if n < 1 or k < 1:
        raise DimensionError(f"empty system {A.shape}")
    if b.shape[0] != n:
        raise DimensionError(f"rhs has length {b.shape[0]}, expected {n}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if ridge == 0:
        x, *_ = np.linalg.lstsq(A, b, rcond=None)
        return x
    gram = A.T @ A
    gram[np.diag_indices_from(gram)] += ridge
    return np.linalg.solve(gram, A.T @ b)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row (last axis) onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    shape = v.shape
    x = v.reshape(-1, shape[-1])
    u = -np.sort(-x, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, x.shape[1] + 1)
    cond = u - css / idx > 0
    rho = x.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(x.shape[0]), rho] / (rho + 1)
    return np.maximum(x - theta[:, None], 0.0).reshape(shape)
