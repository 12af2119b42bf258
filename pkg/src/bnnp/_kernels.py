"""Gradient-free hot loop: sum of squared errors of many MLP weight draws.

Used by the Monte Carlo marginal-likelihood estimator, which pushes up to
millions of prior draws through a small network.  A numba kernel is used
when available; set ``BNNP_DISABLE_NUMBA=1`` to force the numpy version.
Both take weights in the global enumeration order (layer by layer, unit by
unit, bias last) and agree to rounding error.
"""

from __future__ import annotations

import os

import numpy as np

ACTIVATIONS = {"relu": 0, "tanh": 1, "silu": 2}

_DISABLED = os.environ.get("BNNP_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
except ImportError:  # pragma: no cover - exercised via the env flag in CI
    njit = None


def _act_numpy(code: int, z):
    if code == 0:
        return np.maximum(z, 0.0)
    if code == 1:
        return np.tanh(z)
    return z / (1.0 + np.exp(-z))


def sse_numpy(weights, x, y, widths, bias: bool, act: int) -> np.ndarray:
    """[M, P] weights, x [n, d0], y [n, dL] -> [M] sums of squared errors."""
    m = weights.shape[0]
    h = np.broadcast_to(x, (m,) + x.shape)
    offset = 0
    layers = len(widths) - 1
    for l in range(layers):
        d_in, units = widths[l] + int(bias), widths[l + 1]
        w = weights[:, offset : offset + units * d_in].reshape(m, units, d_in)
        offset += units * d_in
        if bias:
            h = np.concatenate([h, np.ones(h.shape[:-1] + (1,))], axis=-1)
        z = np.einsum("mnd,mud->mnu", h, w)
        h = _act_numpy(act, z) if l < layers - 1 else z
    return np.sum((h - y) ** 2, axis=(1, 2))


if njit is not None:

    @njit(cache=True, fastmath=False)
    def _sse_numba(weights, x, y, widths, bias, act):  # pragma: no cover - compiled
        m_total = weights.shape[0]
        n = x.shape[0]
        layers = widths.shape[0] - 1
        width_max = 0
        for l in range(widths.shape[0]):
            if widths[l] > width_max:
                width_max = widths[l]
        h = np.empty(width_max)
        z = np.empty(width_max)
        out = np.empty(m_total)
        for m in range(m_total):
            s = 0.0
            for i in range(n):
                for d in range(widths[0]):
                    h[d] = x[i, d]
                offset = 0
                for l in range(layers):
                    d_in = widths[l]
                    units = widths[l + 1]
                    fan_in = d_in + bias
                    for u in range(units):
                        base = offset + u * fan_in
                        acc = 0.0
                        for d in range(d_in):
                            acc += weights[m, base + d] * h[d]
                        if bias:
                            acc += weights[m, base + d_in]
                        z[u] = acc
                    offset += units * fan_in
                    last = l == layers - 1
                    for u in range(units):
                        v = z[u]
                        if not last:
                            if act == 0:
                                v = v if v > 0.0 else 0.0
                            elif act == 1:
                                v = np.tanh(v)
                            else:
                                v = v / (1.0 + np.exp(-v))
                        h[u] = v
                for d in range(widths[layers]):
                    diff = h[d] - y[i, d]
                    s += diff * diff
            out[m] = s
        return out


def numba_available() -> bool:
    return njit is not None


def sse(weights, x, y, widths, bias: bool = True, nonlinearity: str = "relu", backend: str = "auto") -> np.ndarray:
    """Sums of squared errors per weight draw; ``backend`` is auto, numba or numpy."""
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    act = ACTIVATIONS[nonlinearity]
    use_numba = backend == "numba" or (backend == "auto" and njit is not None)
    if backend == "numba" and njit is None:
        raise RuntimeError("numba backend requested but unavailable or disabled")
    if use_numba:
        return _sse_numba(weights, x, y, np.asarray(widths, dtype=np.int64), int(bias), act)
    return sse_numpy(weights, x, y, tuple(int(w) for w in widths), bias, act)
