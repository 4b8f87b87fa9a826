"""Pure numpy implementation of the dense-layer kernels.

Mirrors the compiled ``_kernels`` extension exactly in signature. Used when
the extension is not built or when ``ADVFLOW_PURE_PYTHON=1``.
"""
import numpy as np

IDENTITY = 0
SILU = 1
TANH = 2


def _sigmoid(u):
    # split by sign so exp never overflows
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def dense_forward(x, W, b, act):
    """Return ``(pre, out)`` for ``out = act(x @ W + b)``."""
    pre = x @ W
    pre += b
    if act == IDENTITY:
        return pre, pre
    if act == SILU:
        return pre, pre * _sigmoid(pre)
    if act == TANH:
        return pre, np.tanh(pre)
    raise ValueError(f"unknown activation code {act}")


def dense_backward(x, W, pre, out, grad_out, act):
    """Return ``(grad_x, grad_W, grad_b)`` for one dense layer."""
    if act == IDENTITY:
        delta = grad_out
    elif act == SILU:
        s = _sigmoid(pre)
        delta = grad_out * (s * (1.0 + pre * (1.0 - s)))
    elif act == TANH:
        delta = grad_out * (1.0 - out * out)
    else:
        raise ValueError(f"unknown activation code {act}")
    grad_W = x.T @ delta
    grad_b = delta.sum(axis=0)
    grad_x = delta @ W.T
    return grad_x, grad_W, grad_b
