"""Hot numeric kernels, JIT-compiled with numba when available.

Everything here is a plain array-in/array-out function with two
implementations: a numba ``@njit`` version (``*_numba``) and a pure-numpy
fallback (``*_numpy``). The public names (``gelu_forward`` etc.) are bound to
one of the two at import time:

* ``MIXTRAIN_NUMBA=0`` forces the numpy path,
* otherwise numba is used when it imports cleanly.

Both paths are deterministic run-to-run. They agree to floating-point
roundoff but are not bit-identical to each other (reduction orders differ),
so bit-exactness contracts hold only within a single selected path.

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

from __future__ import annotations

import os

import numpy as np

# tanh-form GELU constants
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def _numba_requested() -> bool:
    return os.environ.get("MIXTRAIN_NUMBA", "1") != "0"


NUMBA_AVAILABLE = False
if _numba_requested():
    try:
        from numba import njit

        NUMBA_AVAILABLE = True
    except ImportError:  # pragma: no cover - mirror of the import guard
        NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def gelu_forward_numpy(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_backward_numpy(x, gy):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layernorm_forward_numpy(x, gain, bias, eps):
    # x: [rows, d] contiguous
    mean = x.mean(axis=1)
    centered = x - mean[:, None]
    var = np.mean(centered * centered, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = centered * rstd[:, None] * gain + bias
    return y, mean, rstd


def layernorm_backward_numpy(x, gain, mean, rstd, gy):
    d = x.shape[1]
    xhat = (x - mean[:, None]) * rstd[:, None]
    gg = gy * gain
    s1 = gg.mean(axis=1, keepdims=True)
    s2 = (gg * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gg - s1 - xhat * s2)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx, ggain, gbias


def softmax_rows_numpy(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward_rows_numpy(s, gy):
    dot = (gy * s).sum(axis=1, keepdims=True)
    return s * (gy - dot)


def adamw_update_numpy(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    # In-place decoupled-decay Adam step on flat arrays; step is 1-based.
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p
    p -= lr * update


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True, nogil=True)
    def _gelu_fwd(x, c, a):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            xi = flat_x[i]
            u = c * (xi + a * xi * xi * xi)
            flat_o[i] = 0.5 * xi * (1.0 + np.tanh(u))
        return out

    @njit(cache=True, nogil=True)
    def _gelu_bwd(x, gy, c, a):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_g = gy.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            xi = flat_x[i]
            u = c * (xi + a * xi * xi * xi)
            t = np.tanh(u)
            du = c * (1.0 + 3.0 * a * xi * xi)
            flat_o[i] = flat_g[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
        return out

    @njit(cache=True, nogil=True)
    def _ln_fwd(x, gain, bias, eps):
        n, d = x.shape
        y = np.empty_like(x)
        mean = np.empty(n, dtype=x.dtype)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            s = x.dtype.type(0.0)
            for j in range(d):
                s += x[i, j]
            mu = s / d
            var = x.dtype.type(0.0)
            for j in range(d):
                t = x[i, j] - mu
                var += t * t
            r = 1.0 / np.sqrt(var / d + eps)
            mean[i] = mu
            rstd[i] = r
            for j in range(d):
                y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]
        return y, mean, rstd

    @njit(cache=True, nogil=True)
    def _ln_bwd(x, gain, mean, rstd, gy):
        n, d = x.shape
        gx = np.empty_like(x)
        ggain = np.zeros(d, dtype=x.dtype)
        gbias = np.zeros(d, dtype=x.dtype)
        for i in range(n):
            mu = mean[i]
            r = rstd[i]
            s1 = x.dtype.type(0.0)
            s2 = x.dtype.type(0.0)
            for j in range(d):
                xh = (x[i, j] - mu) * r
                gg = gy[i, j] * gain[j]
                s1 += gg
                s2 += gg * xh
                ggain[j] += gy[i, j] * xh
                gbias[j] += gy[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                xh = (x[i, j] - mu) * r
                gg = gy[i, j] * gain[j]
                gx[i, j] = r * (gg - s1 - xh * s2)
        return gx, ggain, gbias

    @njit(cache=True, nogil=True)
    def _softmax_rows(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = x.dtype.type(0.0)
            for j in range(d):
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(d):
                out[i, j] /= s
        return out

    @njit(cache=True, nogil=True)
    def _softmax_bwd_rows(s, gy):
        n, d = s.shape
        out = np.empty_like(s)
        for i in range(n):
            dot = s.dtype.type(0.0)
            for j in range(d):
                dot += gy[i, j] * s[i, j]
            for j in range(d):
                out[i, j] = s[i, j] * (gy[i, j] - dot)
        return out

    @njit(cache=True, nogil=True)
    def _adamw(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
        c1 = 1.0 - beta1 ** step
        c2 = 1.0 - beta2 ** step
        for i in range(p.size):
            mi = beta1 * m[i] + (1.0 - beta1) * g[i]
            vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            m[i] = mi
            v[i] = vi
            upd = (mi / c1) / (np.sqrt(vi / c2) + eps) + weight_decay * p[i]
            p[i] -= lr * upd

    def gelu_forward_numba(x):
        dt = x.dtype.type
        return _gelu_fwd(x, dt(_GELU_C), dt(_GELU_A))

    def gelu_backward_numba(x, gy):
        dt = x.dtype.type
        return _gelu_bwd(x, gy, dt(_GELU_C), dt(_GELU_A))

    def layernorm_forward_numba(x, gain, bias, eps):
        return _ln_fwd(x, gain, bias, x.dtype.type(eps))

    def layernorm_backward_numba(x, gain, mean, rstd, gy):
        return _ln_bwd(x, gain, mean, rstd, gy)

    def softmax_rows_numba(x):
        return _softmax_rows(x)

    def softmax_backward_rows_numba(s, gy):
        return _softmax_bwd_rows(s, gy)

    def adamw_update_numba(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
        dt = p.dtype.type
        _adamw(p, g, m, v, np.int64(step), dt(lr), dt(beta1), dt(beta2),
               dt(eps), dt(weight_decay))

else:
    gelu_forward_numba = None
    gelu_backward_numba = None
    layernorm_forward_numba = None
    layernorm_backward_numba = None
    softmax_rows_numba = None
    softmax_backward_rows_numba = None
    adamw_update_numba = None


if USE_NUMBA:
    gelu_forward = gelu_forward_numba
    gelu_backward = gelu_backward_numba
    layernorm_forward = layernorm_forward_numba
    layernorm_backward = layernorm_backward_numba
    softmax_rows = softmax_rows_numba
    softmax_backward_rows = softmax_backward_rows_numba
    adamw_update = adamw_update_numba
else:
    gelu_forward = gelu_forward_numpy
    gelu_backward = gelu_backward_numpy
    layernorm_forward = layernorm_forward_numpy
    layernorm_backward = layernorm_backward_numpy
    softmax_rows = softmax_rows_numpy
    softmax_backward_rows = softmax_backward_rows_numpy
    adamw_update = adamw_update_numpy
