"""Forward kernels and hand-written vector-Jacobian products.

Every primitive comes as a ``*_forward`` / ``*_vjp`` pair. Forward functions
are pure. VJP functions take the forward inputs (plus any cheap saved values)
and an output cotangent, and return cotangents for every input and parameter.
Flags such as ``need_params`` let callers skip work they do not use, which
matters in the Neumann loop where only input cotangents are needed.

Volumes fed to the 3-D convolutions are laid out ``(C, L, h, w)``; images fed
to the 2-D convolution are ``(C, h, w)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, DomainError

LN_EPS = 1e-5

# cap on the im2col scratch buffer, in scalars
_IM2COL_BUDGET = 4_000_000


# ---------------------------------------------------------------------------
# convolutions (kernel 3 per spatial axis, stride 1, zero padding 1)
# ---------------------------------------------------------------------------

def _offsets(ndim):
    return list(itertools.product(range(3), repeat=ndim))


def _chunks(x_shape, ndim):
    cin = x_shape[0]
    spatial = x_shape[1:]
    per_row = cin * 3 ** ndim * int(np.prod(spatial[1:], dtype=np.int64))
    step = max(1, min(spatial[0], _IM2COL_BUDGET // max(per_row, 1)))
    for s0 in range(0, spatial[0], step):
        yield s0, min(step, spatial[0] - s0)


def _fill_cols(xp, s0, n, ndim, cols):
    spatial = xp.shape[1:]
    rest = tuple(s - 2 for s in spatial[1:])
    for k, off in enumerate(_offsets(ndim)):
        sl = (slice(None), slice(s0 + off[0], s0 + off[0] + n)) + tuple(
            slice(o, o + e) for o, e in zip(off[1:], rest)
        )
        cols[:, k] = xp[sl]


def _conv_forward(x, weight, bias, ndim):
    if x.ndim != ndim + 1 or weight.ndim != ndim + 2:
        raise DimensionError(f"conv{ndim}d expects input rank {ndim + 1}, got {x.shape}")
    cout, cin = weight.shape[:2]
    if x.shape[0] != cin:
        raise DimensionError(f"conv{ndim}d: weight expects {cin} input channels, got {x.shape[0]}")
    if weight.shape[2:] != (3,) * ndim:
        raise DimensionError(f"conv{ndim}d: kernel must be 3 along every axis, got {weight.shape[2:]}")
    spatial = x.shape[1:]
    xp = np.pad(x, [(0, 0)] + [(1, 1)] * ndim)
    wm = weight.reshape(cout, -1)
    out = np.empty((cout,) + spatial, dtype=np.result_type(x, weight))
    for s0, n in _chunks(x.shape, ndim):
        cols = np.empty((cin, 3 ** ndim, n) + spatial[1:], dtype=xp.dtype)
        _fill_cols(xp, s0, n, ndim, cols)
        out[:, s0:s0 + n] = (wm @ cols.reshape(wm.shape[1], -1)).reshape((cout, n) + spatial[1:])
    if bias is not None:
        out += bias.reshape((cout,) + (1,) * ndim)
    return out


def _conv_vjp(x, weight, gout, ndim, need_input, need_params):
    cout, cin = weight.shape[:2]
    if gout.shape != (cout,) + x.shape[1:]:
        raise DimensionError(f"cotangent shape {gout.shape} does not match conv output")
    gx = gw = gb = None
    if need_input:
        # adjoint of a same-padded correlation: correlate with the flipped,
        # channel-transposed kernel
        flipped = np.flip(weight, axis=tuple(range(2, ndim + 2))).swapaxes(0, 1)
        gx = _conv_forward(gout, np.ascontiguousarray(flipped), None, ndim)
    if need_params:
        spatial = x.shape[1:]
        xp = np.pad(x, [(0, 0)] + [(1, 1)] * ndim)
        gwm = np.zeros((cout, cin * 3 ** ndim), dtype=np.result_type(x, weight))
        for s0, n in _chunks(x.shape, ndim):
            cols = np.empty((cin, 3 ** ndim, n) + spatial[1:], dtype=xp.dtype)
            _fill_cols(xp, s0, n, ndim, cols)
            gwm += gout[:, s0:s0 + n].reshape(cout, -1) @ cols.reshape(gwm.shape[1], -1).T
        gw = gwm.reshape(weight.shape)
        gb = gout.reshape(cout, -1).sum(axis=1)
    return gx, gw, gb


def conv3d_forward(x, weight, bias=None):
    """Same-padded 3x3x3 cross-correlation of a ``(C_in, L, h, w)`` volume."""
    return _conv_forward(x, weight, bias, 3)


def conv3d_vjp(x, weight, gout, need_input=True, need_params=True):
    """Cotangents ``(gx, gweight, gbias)`` of :func:`conv3d_forward`."""
    return _conv_vjp(x, weight, gout, 3, need_input, need_params)


def conv2d_forward(x, weight, bias=None):
    """Same-padded 3x3 cross-correlation of a ``(C_in, h, w)`` image."""
    return _conv_forward(x, weight, bias, 2)


def conv2d_vjp(x, weight, gout, need_input=True, need_params=True):
    """Cotangents ``(gx, gweight, gbias)`` of :func:`conv2d_forward`."""
    return _conv_vjp(x, weight, gout, 2, need_input, need_params)


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_vjp(x, gout):
    return gout * (x > 0)


def sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    """Preimage ``x`` with ``softplus(x) == y`` for ``y > 0``."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise DomainError("softplus preimage requires a positive value")
    return y + np.log(-np.expm1(-y))


def soft_threshold_forward(x, t):
    """Elementwise ``sign(x) * max(|x| - t, 0)``."""
    if t < 0:
        raise DomainError(f"soft-threshold level must be nonnegative, got {t}")
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def soft_threshold_vjp(x, t, gout):
    """Return ``(gx, gt)``; the derivative is taken as 0 on the kink ``|x| == t``."""
    active = np.abs(x) > t
    gx = gout * active
    gt = -float(np.sum(gout * np.sign(x) * active))
    return gx, gt


def softmax_temp_forward(x, gamma):
    """Per-pixel softmax of ``gamma * x`` along the last axis."""
    if gamma <= 0:
        raise DomainError("temperature must be positive")
    z = gamma * x
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_temp_vjp(p, gamma, gout):
    """Input cotangent of :func:`softmax_temp_forward` given its output ``p``."""
    return gamma * p * (gout - np.sum(gout * p, axis=-1, keepdims=True))


def linear_forward(x, weight):
    return weight @ x


def linear_vjp(x, weight, gout):
    return weight.T @ gout, np.outer(gout, x)


# ---------------------------------------------------------------------------
# channel attention and layer norm
# ---------------------------------------------------------------------------

def _mlp(v, w1, w2):
    h = w1 @ v
    return w2 @ np.maximum(h, 0.0), h


def channel_attention_forward(x, w1, w2):
    """Gate each channel of ``x`` by ``sigmoid(mlp(avgpool) + mlp(maxpool))``.

    ``w1`` is ``(C // r, C)`` and ``w2`` is ``(C, C // r)``; the two-layer
    MLP has no biases and a ReLU between layers.
    """
    c = x.shape[0]
    if w1.shape[1] != c or w2.shape[0] != c or w1.shape[0] != w2.shape[1]:
        raise DimensionError(f"attention weights {w1.shape}/{w2.shape} do not fit {c} channels")
    flat = x.reshape(c, -1)
    avg = flat.mean(axis=1)
    mx = flat.max(axis=1)
    s = sigmoid(_mlp(avg, w1, w2)[0] + _mlp(mx, w1, w2)[0])
    return s.reshape((c,) + (1,) * (x.ndim - 1)) * x


def channel_attention_vjp(x, w1, w2, gout, need_params=True):
    """Return ``(gx, gw1, gw2)``; max-pool ties route to the first maximum."""
    c = x.shape[0]
    flat = x.reshape(c, -1)
    n = flat.shape[1]
    avg = flat.mean(axis=1)
    arg = flat.argmax(axis=1)
    mx = flat[np.arange(c), arg]
    out_a, h_a = _mlp(avg, w1, w2)
    out_m, h_m = _mlp(mx, w1, w2)
    s = sigmoid(out_a + out_m)
    gflat = gout.reshape(c, -1)
    gs = np.einsum("cn,cn->c", gflat, flat)
    gx = s[:, None] * gflat
    gpre = gs * s * (1.0 - s)
    gw1 = np.zeros_like(w1)
    gw2 = np.zeros_like(w2)
    for v, h, kind in ((avg, h_a, "avg"), (mx, h_m, "max")):
        hr = np.maximum(h, 0.0)
        gh = (w2.T @ gpre) * (h > 0)
        if need_params:
            gw2 += np.outer(gpre, hr)
            gw1 += np.outer(gh, v)
        gv = w1.T @ gh
        if kind == "avg":
            gx += gv[:, None] / n
        else:
            gx[np.arange(c), arg] += gv
    return gx.reshape(x.shape), gw1, gw2


def layer_norm_forward(x, gain, offset, return_stats=False):
    """Normalize each spatial position of a ``(C, L, h, w)`` volume over ``(C, L)``.

    After normalization to zero mean and unit variance a per-channel affine
    map ``gain[c] * xhat + offset[c]`` is applied.
    """
    if x.shape[0] * x.shape[1] < 2:
        raise DimensionError("layer norm group must contain at least two values")
    mu = x.mean(axis=(0, 1), keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=(0, 1), keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out = gain[:, None, None, None] * xhat + offset[:, None, None, None]
    if return_stats:
        return out, xhat, inv
    return out


def layer_norm_vjp(x, gain, gout, xhat=None, inv=None, need_params=True):
    """Return ``(gx, ggain, goffset)`` for :func:`layer_norm_forward`."""
    if xhat is None or inv is None:
        _, xhat, inv = layer_norm_forward(x, gain, np.zeros_like(gain), return_stats=True)
    gxhat = gout * gain[:, None, None, None]
    m1 = gxhat.mean(axis=(0, 1), keepdims=True)
    m2 = np.mean(gxhat * xhat, axis=(0, 1), keepdims=True)
    gx = inv * (gxhat - m1 - xhat * m2)
    ggain = goffset = None
    if need_params:
        ggain = np.einsum("clhw,clhw->c", gout, xhat)
        goffset = gout.sum(axis=(1, 2, 3))
    return gx, ggain, goffset


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def fd_check(f, vjp_dot, point, direction, step=1e-5):
    """Compare a VJP against a central finite difference along ``direction``.

    Parameters
    ----------
    f : callable
        Scalar function of ``point``. Typically ``<cotangent, op(point)>``.
    vjp_dot : float
        ``<vjp(point, cotangent), direction>`` as computed by the VJP under test.
    point, direction : ndarray
        Evaluation point and perturbation direction, same shape.

    Returns
    -------
    float
        ``|vjp_dot - fd| / (|fd| + 1e-12)``.
    """
    fd = (f(point + step * direction) - f(point - step * direction)) / (2.0 * step)
    return abs(vjp_dot - fd) / (abs(fd) + 1e-12)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class TapeNode:
    name: str
    inputs: tuple
    vjp: Callable
    saved: int = 0


@dataclass
class Tape:
    """A linear record of operations replayed in reverse for backprop.

    Each node's ``vjp`` receives the cotangent of its output and returns the
    cotangent of its (single) state input; parameter cotangents are
    accumulated by the closure itself. ``saved`` is the number of scalars the
    node keeps alive, which the memory ledger reads.
    """

    nodes: list = field(default_factory=list)
    ledger: object = None

    def record(self, name, vjp, saved=0, inputs=()):
        self.nodes.append(TapeNode(name, tuple(inputs), vjp, saved))
        if self.ledger is not None:
            self.ledger.retain(saved)

    def backward(self, gout):
        g = gout
        while self.nodes:
            node = self.nodes.pop()
            g = node.vjp(g)
            if self.ledger is not None:
                self.ledger.release(node.saved)
        return g


def check_attention_ratio(channels, ratio):
    if ratio < 1 or channels % ratio != 0:
        raise ConfigError(f"channel count {channels} is not divisible by attention ratio {ratio}")
    return channels // ratio
