"""numba kernels against their numpy twins."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from daegan import kernels

pytestmark = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


def _padded(r, b, c, h, w, k, stride, pad):
    xp = np.pad(r.standard_normal((b, c, h, w)), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    return xp, ho, wo


@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 9), st.integers(3, 9),
       st.sampled_from([1, 3]), st.integers(1, 2), st.sampled_from([np.float32, np.float64]))
def test_im2col_col2im_agree(b, c, h, w, k, stride, dtype):
    r = np.random.default_rng(b * 1000 + c * 100 + h * 10 + w)
    xp, ho, wo = _padded(r, b, c, h, w, k, stride, k // 2)
    xp = xp.astype(dtype)
    a = kernels.im2col_numpy(xp, k, stride, ho, wo)
    n = kernels.im2col_numba(xp, k, stride, ho, wo)
    np.testing.assert_array_equal(a, n)
    cols = r.standard_normal(a.shape).astype(dtype)
    ga = kernels.col2im_numpy(cols, xp.shape[2], xp.shape[3], stride)
    gn = kernels.col2im_numba(cols, xp.shape[2], xp.shape[3], stride)
    np.testing.assert_allclose(ga, gn, rtol=1e-5 if dtype == np.float32 else 1e-12,
                               atol=1e-5 if dtype == np.float32 else 1e-12)


def test_col2im_is_adjoint_of_im2col(rng):
    xp, ho, wo = _padded(rng, 2, 3, 6, 5, 3, 2, 1)
    cols = kernels.im2col(xp, 3, 2, ho, wo)
    g = rng.standard_normal(cols.shape)
    back = kernels.col2im(g, xp.shape[2], xp.shape[3], 2)
    assert np.isclose((cols * g).sum(), (xp * back).sum(), rtol=1e-10)


@given(st.integers(1, 2), st.integers(1, 3), st.integers(2, 7), st.integers(2, 7),
       st.integers(1, 6), st.integers(1, 6), st.floats(0.5, 3.0))
def test_grid_sample_agree(b, c, hs, ws, ht, wt, spread):
    r = np.random.default_rng(hs * 100 + ws * 10 + ht)
    img = r.standard_normal((b, c, hs, ws))
    gx = r.uniform(-spread, ws - 1 + spread, size=(b, ht, wt))
    gy = r.uniform(-spread, hs - 1 + spread, size=(b, ht, wt))
    np.testing.assert_allclose(kernels.grid_sample_fwd_numpy(img, gx, gy),
                               kernels.grid_sample_fwd_numba(img, gx, gy), atol=1e-12)
    gout = r.standard_normal((b, c, ht, wt))
    for a, n in zip(kernels.grid_sample_bwd_numpy(img, gx, gy, gout),
                    kernels.grid_sample_bwd_numba(img, gx, gy, gout)):
        np.testing.assert_allclose(a, n, atol=1e-12)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, DAEGAN_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "from daegan import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
