import numpy as np
import pytest

from vfldp import _kernels, rng


@pytest.mark.parametrize("n", [1, 2, 7, 1000, 4097])
def test_backends_agree_on_gaussian_stream(n):
    key = rng.path_key((3, 1, 17, 0))
    a = _kernels.gaussian_fill_numpy(key, n)
    b = _kernels.gaussian_fill_numba(np.uint64(key), n)
    assert a.shape == b.shape == (n,)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


def test_stream_prefix_property():
    key = rng.path_key((9,))
    long = _kernels.gaussian_fill(key, 101)
    assert np.array_equal(_kernels.gaussian_fill(key, 100), long[:100])


def test_different_paths_give_different_streams():
    a = rng.normal((1, 0, 0, 0), (64,))
    b = rng.normal((1, 0, 1, 0), (64,))
    c = rng.normal((1, 1, 0, 0), (64,))
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_gaussian_moments_large_sample():
    x = rng.normal((2024,), (400_000,))
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.01
    # fourth moment of a standard normal is 3
    assert abs(np.mean(x ** 4) - 3.0) < 0.05


def test_relu_backward_backends(rng):
    g = rng.normal(size=(13, 7))
    z = rng.normal(size=(13, 7))
    z[0, 0] = 0.0
    expected = np.where(z > 0, g, 0.0)
    np.testing.assert_array_equal(_kernels.relu_backward_numpy(g, z), expected)
    np.testing.assert_array_equal(_kernels.relu_backward_numba(g, z), expected)
    assert _kernels.relu_backward_numba(g, z)[0, 0] == 0.0


def test_sq_norm_backends(rng):
    v = rng.normal(size=999)
    ref = float(np.sum(v * v))
    assert _kernels.sq_norm_numba(v) == pytest.approx(ref, rel=1e-12)
    assert _kernels.sq_norm_numpy(v) == pytest.approx(ref, rel=1e-12)


def test_env_flag_selects_numpy(monkeypatch):
    import importlib

    monkeypatch.setenv("VFLDP_NO_NUMBA", "1")
    mod = importlib.reload(_kernels)
    try:
        assert mod.BACKEND == "numpy"
        assert not mod.USE_NUMBA
    finally:
        monkeypatch.delenv("VFLDP_NO_NUMBA")
        importlib.reload(_kernels)
