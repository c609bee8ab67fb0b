import numpy as np
import pytest

from kgtn import backend
from kgtn import _kernels_py


def _random_cell_inputs(rng, k, d):
    a = rng.normal(size=(k, 2 * d))
    h = rng.normal(size=(k, d))
    mats = [rng.normal(size=(d, 2 * d)) * 0.5 for _ in range(3)]
    umats = [rng.normal(size=(d, d)) * 0.5 for _ in range(3)]
    return a, h, mats[0], umats[0], mats[1], umats[1], mats[2], umats[2]


def test_numpy_backend_always_available():
    assert "numpy" in backend.available()
    assert backend.get("numpy") is _kernels_py


def test_use_rejects_unknown_backend():
    with pytest.raises(ValueError, match="unknown backend"):
        backend.use("gpu")


@pytest.mark.parametrize("k,d", [(1, 1), (3, 2), (5, 4), (64, 32)])
def test_ext_matches_numpy(k, d):
    if "ext" not in backend.available():
        pytest.skip("compiled kernel not built")
    ext = backend.get("ext")
    rng = np.random.default_rng(k * 100 + d)
    args = _random_cell_inputs(rng, k, d)

    h_np, cache_np = _kernels_py.gru_cell_forward(*args)
    h_ex, cache_ex = ext.gru_cell_forward(*args)
    np.testing.assert_allclose(h_ex, h_np, rtol=1e-13, atol=1e-14)
    for got, want in zip(cache_ex, cache_np):
        np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-14)

    g = rng.normal(size=(k, d))
    grads_np = _kernels_py.gru_cell_backward(g, *args, cache_np)
    grads_ex = ext.gru_cell_backward(g, *args, cache_ex)
    assert len(grads_ex) == len(grads_np) == 8
    for got, want in zip(grads_ex, grads_np):
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-13)


def test_use_switches_active_backend():
    original = backend.active_name()
    try:
        backend.use("numpy")
        assert backend.active_name() == "numpy"
    finally:
        backend.use(original)
