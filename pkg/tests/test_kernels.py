"""The compiled kernels and the numpy fallback must agree."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advflow import _kernels_py, kernels

compiled = pytest.importorskip("advflow._kernels")

ACTS = [kernels.IDENTITY, kernels.SILU, kernels.TANH]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 17), k=st.integers(1, 9), m=st.integers(1, 11),
       act=st.sampled_from(ACTS), seed=st.integers(0, 2**31))
def test_backends_agree(n, k, m, act, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, k)) * 3
    W = r.normal(size=(k, m))
    b = r.normal(size=m)
    g = r.normal(size=(n, m))
    pre_c, out_c = compiled.dense_forward(x, W, b, act)
    pre_p, out_p = _kernels_py.dense_forward(x, W, b, act)
    np.testing.assert_allclose(pre_c, pre_p, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out_c, out_p, rtol=1e-12, atol=1e-12)
    for a, bb in zip(compiled.dense_backward(x, W, pre_c, out_c, g, act),
                     _kernels_py.dense_backward(x, W, pre_p, out_p, g, act)):
        np.testing.assert_allclose(a, bb, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("impl", [compiled, _kernels_py])
def test_activations_saturate_without_overflow(impl):
    x = np.array([[-1e3], [-50.0], [0.0], [50.0], [1e3]])
    W = np.ones((1, 1))
    b = np.zeros(1)
    _, silu = impl.dense_forward(x, W, b, kernels.SILU)
    _, tanh = impl.dense_forward(x, W, b, kernels.TANH)
    assert np.all(np.isfinite(silu)) and np.all(np.isfinite(tanh))
    np.testing.assert_allclose(tanh[:, 0], np.tanh(x[:, 0]), atol=1e-12)
    np.testing.assert_allclose(silu[[0, 2, 4], 0], [0.0, 0.0, 1e3], atol=1e-12)


def test_forward_matches_closed_form(rng):
    x = rng.normal(size=(5, 3))
    W = rng.normal(size=(3, 4))
    b = rng.normal(size=4)
    pre, out = kernels.dense_forward(x, W, b, kernels.SILU)
    u = x @ W + b
    np.testing.assert_allclose(pre, u, rtol=1e-13)
    np.testing.assert_allclose(out, u / (1 + np.exp(-u)), rtol=1e-12)


def test_backend_env_switch(monkeypatch):
    import importlib
    monkeypatch.setenv("ADVFLOW_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("ADVFLOW_PURE_PYTHON")
        importlib.reload(kernels)
