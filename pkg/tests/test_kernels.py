import os
import subprocess
import sys

import numpy as np
import pytest

from bnnp import _kernels as K
from bnnp.datagen import mlp_forward

needs_numba = pytest.mark.skipif(not K.numba_available(), reason="numba disabled or missing")


def random_case(rng, widths, m=50, n=7, bias=True):
    p = sum((widths[l] + int(bias)) * widths[l + 1] for l in range(len(widths) - 1))
    w = rng.standard_normal((m, p))
    x = rng.standard_normal((n, widths[0]))
    y = rng.standard_normal((n, widths[-1]))
    return w, x, y


def reference_sse(w_flat, x, y, widths, bias, act):
    out = []
    for row in w_flat:
        mats, off = [], 0
        for l in range(len(widths) - 1):
            d_in, u = widths[l] + int(bias), widths[l + 1]
            mats.append(row[off : off + d_in * u].reshape(u, d_in).T)
            off += d_in * u
        out.append(np.sum((mlp_forward(mats, x, act, bias) - y) ** 2))
    return np.array(out)


@pytest.mark.parametrize("act", ["relu", "tanh", "silu"])
@pytest.mark.parametrize("bias", [True, False])
def test_numpy_kernel_matches_reference(rng, act, bias):
    widths = (2, 5, 4, 1)
    w, x, y = random_case(rng, widths, bias=bias)
    got = K.sse(w, x, y, widths, bias, act, backend="numpy")
    np.testing.assert_allclose(got, reference_sse(w, x, y, widths, bias, act), rtol=1e-12)


@needs_numba
@pytest.mark.parametrize("act", ["relu", "tanh", "silu"])
@pytest.mark.parametrize("bias", [True, False])
def test_numba_matches_numpy(rng, act, bias):
    widths = (1, 20, 20, 1)
    w, x, y = random_case(rng, widths, m=200, n=30, bias=bias)
    a = K.sse(w, x, y, widths, bias, act, backend="numba")
    b = K.sse(w, x, y, widths, bias, act, backend="numpy")
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_multi_output(rng):
    widths = (3, 4, 2)
    w, x, y = random_case(rng, widths)
    np.testing.assert_allclose(K.sse(w, x, y, widths), reference_sse(w, x, y, widths, True, "relu"), rtol=1e-12)


def test_env_flag_disables_numba():
    code = "from bnnp import _kernels as K; print(K.numba_available())"
    env = dict(os.environ, BNNP_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"


def test_numba_backend_unavailable_raises(monkeypatch, rng):
    monkeypatch.setattr(K, "njit", None)
    w, x, y = random_case(rng, (1, 2, 1))
    with pytest.raises(RuntimeError):
        K.sse(w, x, y, (1, 2, 1), backend="numba")
    assert K.sse(w, x, y, (1, 2, 1)).shape == (50,)
