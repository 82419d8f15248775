import os
import subprocess
import sys

import numpy as np
import pytest

from cyclese import _kernels as K


def _inputs(rng, T=7, H=5, P=3):
    zx = rng.normal(0, 1.5, (T, 4 * H))
    w_rec = rng.normal(0, 0.5, (4 * H, P))
    w_proj = rng.normal(0, 0.5, (P, H))
    return zx, w_rec, w_proj


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, CYCLESE_DISABLE_NUMBA="1")
    code = "from cyclese import _kernels as K; print(K.BACKEND, K.HAS_NUMBA, K.lstmp_forward is K.forward_numpy)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "False", "True"]


def test_dispatch_matches_backend():
    if K.HAS_NUMBA:
        assert K.BACKEND == "numba" and K.lstmp_forward is K.forward_numba
    else:
        assert K.BACKEND == "numpy" and K.lstmp_forward is K.forward_numpy


def test_numpy_forward_against_step_definition(rng):
    zx, w_rec, w_proj = _inputs(rng)
    gates, cells, hidden, proj = K.forward_numpy(zx, w_rec, w_proj)
    H = cells.shape[1]
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    r, c = np.zeros(w_proj.shape[0]), np.zeros(H)
    for t in range(zx.shape[0]):
        z = zx[t] + w_rec @ r
        c = sig(z[H:2 * H]) * c + sig(z[:H]) * np.tanh(z[2 * H:3 * H])
        h = sig(z[3 * H:]) * np.tanh(c)
        r = w_proj @ h
        np.testing.assert_allclose(cells[t], c, atol=1e-13)
        np.testing.assert_allclose(proj[t], r, atol=1e-13)


def test_numpy_backward_matches_finite_differences(rng):
    zx, w_rec, w_proj = _inputs(rng, T=5, H=3, P=2)
    target = rng.normal(size=(5, 2))

    def loss(z):
        return 0.5 * np.sum((K.forward_numpy(z, w_rec, w_proj)[3] - target) ** 2)

    gates, cells, hidden, proj = K.forward_numpy(zx, w_rec, w_proj)
    dz, _ = K.backward_numpy(proj - target, gates, cells, hidden, w_rec, w_proj)
    eps = 1e-6
    for idx in np.ndindex(zx.shape):
        up, down = zx.copy(), zx.copy()
        up[idx] += eps
        down[idx] -= eps
        assert dz[idx] == pytest.approx((loss(up) - loss(down)) / (2 * eps), abs=1e-7)


@pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not available")
@pytest.mark.parametrize("T,H,P", [(1, 2, 1), (7, 5, 3), (30, 16, 8)])
def test_numba_matches_numpy(rng, T, H, P):
    zx, w_rec, w_proj = _inputs(rng, T, H, P)
    ref = K.forward_numpy(zx, w_rec, w_proj)
    got = K.forward_numba(zx, w_rec, w_proj)
    for a, b in zip(ref, got):
        np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-13)
    d_proj = rng.normal(size=(T, P))
    ref_b = K.backward_numpy(d_proj, *ref[:3], w_rec, w_proj)
    got_b = K.backward_numba(d_proj, *ref[:3], w_rec, w_proj)
    for a, b in zip(ref_b, got_b):
        np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-13)
