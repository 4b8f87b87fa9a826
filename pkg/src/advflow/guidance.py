"""Time-conditioned classifiers and the guidance losses built on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .flows import ConditionalDataset, interp, sample
from .netcore import AdamW, Network

GUIDANCE_MODES = ("off", "simple", "flow", "implicit")


@dataclass
class GuidanceConfig:
    mode: str = "off"
    lambda_cg: float = 0.0
    t_lo: float = 0.0
    t_hi: float = 1.0
    # target timesteps that receive guidance in multi-step training; empty = all
    t_set: tuple = ()

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if not 0.0 <= self.t_lo <= self.t_hi <= 1.0:
            raise ValueError("guidance timestep range must satisfy 0 <= lo <= hi <= 1")
        if self.lambda_cg < 0:
            raise ValueError("lambda_cg must be nonnegative")

    def sample_t(self, count, rng):
        # degenerate ranges return the constant exactly so t'=0 matches simple mode
        if self.t_lo == self.t_hi:
            return np.full(count, self.t_lo)
        return rng.uniform(self.t_lo, self.t_hi, size=count)


class Classifier:
    """Wraps a network producing class logits from ``(x_t, t')``."""

    def __init__(self, net):
        if net.n_times != 1:
            raise ValueError("classifier net must take one timestep input")
        self.net = net

    @property
    def n_classes(self):
        return self.net.out_dim

    def log_probs(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
        return log_softmax(self.net.forward(x, times=t[:, None]), axis=1)

    def log_prob_and_grad(self, x, t, c, row_weights):
        """Return per-row ``log p(c | x_t)`` and the gradient of
        ``sum(row_weights * log p)`` with respect to ``x``."""
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
        c = np.asarray(c, dtype=np.int64)
        if c.min(initial=0) < 0 or c.max(initial=0) >= self.n_classes:
            raise ValueError("class id out of range")
        logits = self.net.forward(x, times=t[:, None])
        logp = log_softmax(logits, axis=1)
        rows = np.arange(len(x))
        onehot = np.zeros_like(logp)
        onehot[rows, c] = 1.0
        upstream = (onehot - softmax(logits, axis=1)) * np.asarray(row_weights, dtype=np.float64)[:, None]
        _, gx = self.net.backward(upstream)
        return logp[rows, c], gx

    def accuracy(self, x, c, t=0.0):
        return float(np.mean(np.argmax(self.log_probs(x, t), axis=1) == np.asarray(c)))


def train_classifier(dataset: ConditionalDataset, prior, steps=2000, batch=256, lr=3e-3,
                     t_range=(0.0, 1.0), hidden=(64, 64), seed=0):
    """Cross-entropy training on ``interp(x, z, t')`` with ``t' ~ U(t_range)``."""
    if dataset.n_classes < 2:
        raise ValueError("classifier training needs at least two classes")
    rng = np.random.default_rng(seed)
    net = Network(dataset.dim, dataset.n_classes, hidden=hidden, n_times=1, rng=rng)
    opt = AdamW(net.params, lr=lr, beta1=0.9, beta2=0.999, weight_decay=0.0)
    clf = Classifier(net)
    lo, hi = t_range
    for _ in range(steps):
        x, c = dataset.sample(batch, rng)
        z = sample(prior, batch, rng)
        t = rng.uniform(lo, hi, size=batch) if hi > lo else np.full(batch, lo)
        logits = net.forward(interp(x, z, t), times=t[:, None])
        p = softmax(logits, axis=1)
        p[np.arange(batch), c] -= 1.0
        grads, _ = net.backward(p / batch)
        opt.step(grads)
    return clf


def cross_entropy(clf, x, c, t=0.0):
    lp = clf.log_probs(x, t)
    return float(-np.mean(lp[np.arange(len(x)), np.asarray(c)]))


def cg_loss(clf, gx, c, z_prime=None, t_prime=None, mode="flow"):
    return cg_loss_and_grad(clf, gx, c, z_prime, t_prime, mode)[0]


def cg_loss_and_grad(clf, gx, c, z_prime=None, t_prime=None, mode="flow"):
    """``mean -log p(c | interp(gx, z', t'))`` and its gradient w.r.t. ``gx``.

    ``simple`` mode evaluates the classifier on ``gx`` at ``t' = 0``.
    """
    gx = np.asarray(gx, dtype=np.float64)
    batch = len(gx)
    if mode == "simple":
        xt = gx
        t = np.zeros(batch)
        chain = 1.0
    elif mode == "flow":
        if z_prime is None or t_prime is None:
            raise ValueError("flow guidance needs z' and t'")
        t = np.broadcast_to(np.asarray(t_prime, dtype=np.float64), (batch,))
        xt = interp(gx, z_prime, t)
        chain = (1.0 - t).reshape(batch, *([1] * (gx.ndim - 1)))
    else:
        raise ValueError(f"unknown cg mode {mode!r}")
    logp, g = clf.log_prob_and_grad(xt, t, c, np.full(batch, -1.0 / batch))
    return float(-np.mean(logp)), g.reshape(gx.shape) * chain


class ConditionalVelocity:
    """Velocity net evaluated with a class id or with the null (unconditional) id."""

    def __init__(self, net, n_classes):
        if net.n_classes != n_classes + 1:
            raise ValueError("velocity net needs one extra null class for unconditional mode")
        self.net = net
        self.n_classes = n_classes

    def __call__(self, x, t, c=None):
        x = np.asarray(x, dtype=np.float64)
        cond = np.full(len(x), self.n_classes) if c is None else np.asarray(c)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
        return self.net.forward(x, cond=cond, times=t[:, None])


def implicit_cfg_loss(v_net, gx, c, z_prime, t_prime):
    return implicit_cfg_loss_and_grad(v_net, gx, c, z_prime, t_prime)[0]


def implicit_cfg_loss_and_grad(v_net, gx, c, z_prime, t_prime):
    """Guidance from a pretrained conditional flow model.

    The implicit classifier gradient ``v(x_t', t') - v(x_t', t', c)`` is held
    constant, so the loss gradient w.r.t. ``gx`` is ``-g_cls / n`` per row
    (divided by the batch for the mean).
    """
    if not isinstance(v_net, ConditionalVelocity) and not getattr(v_net, "supports_unconditional", False):
        raise ValueError("v_net must support unconditional evaluation")
    gx = np.asarray(gx, dtype=np.float64)
    if gx.ndim == 1:
        gx = gx[:, None]
    batch, n = gx.shape
    t = np.broadcast_to(np.asarray(t_prime, dtype=np.float64), (batch,))
    xt = interp(gx, np.asarray(z_prime, dtype=np.float64).reshape(gx.shape), t)
    g_cls = v_net(xt, t) - v_net(xt, t, c)
    loss = float(np.mean(-np.sum(gx * g_cls, axis=1) / n))
    return loss, -g_cls / (n * batch)


def multistep_cg_loss(clf, g_out, t, c, t_set=()):
    """``mean -log p(c | G, t)`` over rows whose target ``t`` is in ``t_set``.

    An empty ``t_set`` selects every row; no selected rows gives 0.
    """
    return multistep_cg_loss_and_grad(clf, g_out, t, c, t_set)[0]


def multistep_cg_loss_and_grad(clf, g_out, t, c, t_set=()):
    g_out = np.asarray(g_out, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(len(g_out))
    if len(t_set):
        sel = np.any(np.isclose(t[:, None], np.asarray(t_set, dtype=np.float64)[None, :], atol=1e-12), axis=1)
    else:
        sel = np.ones(len(t), dtype=bool)
    grad = np.zeros_like(g_out)
    k = int(sel.sum())
    if k == 0:
        return 0.0, grad
    c = np.asarray(c)
    logp, g = clf.log_prob_and_grad(g_out[sel], t[sel], c[sel], np.full(k, -1.0 / k))
    grad[sel] = g.reshape(grad[sel].shape)
    return float(-np.mean(logp)), grad
