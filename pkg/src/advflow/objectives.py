"""Loss functions: relativistic adversarial losses, finite-difference gradient
penalties, logit centering, the transport regularizer, flow matching, and the
generator parameterizations.

Functions that feed the trainer return ``(value, grad...)`` so the caller can
run the manual backward pass; the plain-value forms are kept for evaluation
and tests.
"""
import math

import numpy as np
from scipy.special import expit

LN2 = math.log(2.0)


def f(u):
    """``-log(sigmoid(u))`` computed as ``softplus(-u)``."""
    return np.logaddexp(0.0, -np.asarray(u, dtype=np.float64))


def f_grad(u):
    return -expit(-np.asarray(u, dtype=np.float64))


def _paired(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {b.shape}")
    return a, b


def adv_losses(logits_real, logits_fake):
    """Return ``(L_D, L_G)`` of the relativistic pair objective."""
    r, g = _paired(logits_real, logits_fake)
    return float(np.mean(f(r - g))), float(np.mean(f(g - r)))


def relativistic(first, second):
    """``mean f(first - second)`` with gradients for both logit arrays."""
    a, b = _paired(first, second)
    u = a - b
    d = f_grad(u) / u.size
    return float(np.mean(f(u))), d, -d


def weighting(s, t, delta=0.001):
    """``max(|s - t|, delta)``."""
    return np.maximum(np.abs(np.asarray(s, dtype=np.float64) - np.asarray(t, dtype=np.float64)), delta)


def gp_rows(batch, ratio):
    """Number of leading rows that receive the gradient penalty."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError("gp batch ratio must lie in (0, 1]")
    return max(int(round(batch * ratio)), 1)


def fd_gradient_penalty(D, base_points, noise, cond=None, t=None, eps=0.01, weights=None):
    """Finite-difference estimate of ``E ||grad D||^2`` at ``base_points``.

    ``D`` is a callable ``D(x, cond, t)`` (a :class:`Network` works).
    ``weights`` optionally scales each row, e.g. by ``w(s, t)``.
    """
    if eps <= 0:
        raise ValueError("finite-difference step must be positive")
    base = np.asarray(base_points, dtype=np.float64)
    if base.ndim == 1:
        base = base[:, None]
    noise = np.asarray(noise, dtype=np.float64).reshape(base.shape)
    d0 = np.asarray(D(base, cond, t), dtype=np.float64).reshape(len(base))
    d1 = np.asarray(D(base + eps * noise, cond, t), dtype=np.float64).reshape(len(base))
    per_row = (d1 - d0) ** 2 / eps ** 2
    if weights is not None:
        per_row = per_row * np.asarray(weights, dtype=np.float64).reshape(len(base))
    return float(np.mean(per_row))


def fd_penalty_terms(logits_base, logits_shifted, scale):
    """``mean(scale * (shifted - base)^2)`` with gradients for both logit arrays.

    ``scale`` already folds in ``lambda_gp * w(s, t) / eps^2``.
    """
    a, b = _paired(logits_base, logits_shifted)
    scale = np.asarray(scale, dtype=np.float64).reshape(-1, *([1] * (a.ndim - 1)))
    diff = b - a
    val = float(np.mean(scale * diff * diff))
    d_shift = 2.0 * scale * diff / a.size
    return val, -d_shift, d_shift


def logit_centering(logits_real, logits_fake):
    r, g = _paired(logits_real, logits_fake)
    return float(np.mean((r + g) ** 2))


def logit_centering_terms(logits_real, logits_fake):
    r, g = _paired(logits_real, logits_fake)
    s = r + g
    d = 2.0 * s / s.size
    return float(np.mean(s * s)), d, d


def ot_loss(pred_target, source, s=None, t=None, delta=0.001):
    """Transport regularizer ``E (1/n)(1/w(s,t)) ||G - x_s||^2``.

    With ``s`` and ``t`` omitted this is the single-step form (``w = 1``).
    """
    return ot_loss_and_grad(pred_target, source, s, t, delta)[0]


def ot_loss_and_grad(pred_target, source, s=None, t=None, delta=0.001):
    pred = np.asarray(pred_target, dtype=np.float64)
    src = np.asarray(source, dtype=np.float64)
    if pred.shape != src.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {src.shape}")
    if pred.ndim == 1:
        pred = pred[:, None]
        src = src[:, None]
    batch, n = pred.shape
    if s is None and t is None:
        w = np.ones(batch)
    else:
        w = weighting(s, t, delta).reshape(batch)
    diff = pred - src
    per_row = np.sum(diff * diff, axis=1) / (n * w)
    grad = 2.0 * diff / (n * w[:, None] * batch)
    return float(np.mean(per_row)), grad.reshape(np.shape(pred_target))


def flow_matching_loss(v_net, x, z, t, cond=None):
    """``E ||v(x_t, t) - (z - x)||^2`` for a velocity net ``v_net(x_t, cond, t)``."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(len(x))
    xt = (1.0 - t)[:, None] * x + t[:, None] * z if x.ndim == 2 else (1.0 - t) * x + t * z
    v = np.asarray(v_net(xt, cond, t), dtype=np.float64).reshape(x.shape)
    return fm_loss_and_grad(v, x, z)[0]


def fm_loss_and_grad(v_pred, x, z):
    v = np.asarray(v_pred, dtype=np.float64)
    target = np.asarray(z, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    diff = v - target
    rows = diff.reshape(len(diff), -1)
    val = float(np.mean(np.sum(rows * rows, axis=1)))
    return val, 2.0 * diff / len(diff)


def generator_parameterize(g_out, x_s, s=None, t=None, kind="residual"):
    """Map raw network output to the generator prediction.

    ``direct``: ``G = g``. ``residual``: ``G = x_s - (s - t) g``; with no
    timesteps this is the single-step ``z - g(z)``.
    """
    g_out = np.asarray(g_out, dtype=np.float64)
    if kind == "direct":
        return g_out
    if kind != "residual":
        raise ValueError(f"unknown generator parameterization {kind!r}")
    return np.asarray(x_s, dtype=np.float64) - _step(s, t, g_out) * g_out


def generator_parameterize_grad(upstream, s=None, t=None, kind="residual"):
    """Gradient w.r.t. ``g_out`` given ``dL/dG`` (the ``x_s`` path is a constant)."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if kind == "direct":
        return upstream
    return -_step(s, t, upstream) * upstream


def _step(s, t, like):
    if s is None and t is None:
        return 1.0
    h = np.asarray(s, dtype=np.float64) - np.asarray(t, dtype=np.float64)
    if h.ndim == 1 and like.ndim == 2:
        h = h[:, None]
    return h
