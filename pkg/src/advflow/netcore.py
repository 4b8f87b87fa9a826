"""Dense networks with hand-written reverse mode, AdamW, EMA weights and the
gradient-normalization hook.

Networks are small MLPs laid out as::

    h = act(W_in [x, onehot(c)] + b_in)
    repeat R times:
        h = act(W_1 [h, e] + b_1)      # e: timestep or iteration features
        h = act(W_k h + b_k)           # remaining block layers
    y = W_out h + b_out

Arrays are row-major batches (rows = samples) in float64.
"""
from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import kernels

ACTIVATIONS = {"identity": kernels.IDENTITY, "silu": kernels.SILU, "tanh": kernels.TANH}


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in activations, gradients or losses."""


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def time_features(times, k=8):
    """Expand each timestep scalar into ``[t, sin(pi 2^j t), cos(pi 2^j t)]``.

    ``times`` has shape (batch, m); the result has shape (batch, m * (k + 1)).
    """
    if k % 2:
        raise ValueError("time feature count must be even")
    times = np.asarray(times, dtype=np.float64)
    if times.ndim == 1:
        times = times[:, None]
    freqs = math.pi * 2.0 ** np.arange(k // 2)
    ang = times[:, :, None] * freqs
    feats = np.concatenate([times[:, :, None], np.sin(ang), np.cos(ang)], axis=2)
    return feats.reshape(times.shape[0], -1)


def iteration_times(repeat):
    """Pseudo (source, target) timesteps marking each repetition pass."""
    return [(1.0 - r / repeat, 1.0 - (r + 1) / repeat) for r in range(repeat)]


class Network:
    """Dense net with optional class / timestep conditioning and block repetition.

    Parameters
    ----------
    in_dim, out_dim : int
        Data widths.
    hidden : sequence of int
        Hidden widths; the first is the input layer, the rest form the
        repeatable block (so at least two are needed).
    n_classes : int
        0 disables class conditioning, otherwise a one-hot is concatenated
        to the input.
    n_times : int
        Number of timestep scalars fed to the block (0, 1 or 2). Repeated
        nets use this slot for the iteration embedding, so they need 2.
    repeat : int
        How many times the block runs. Parameters are shared across passes.
    input_gain : float
        Multiplier on the input layer's initial weights and biases.
    """

    def __init__(self, in_dim, out_dim, hidden=(64, 64, 64), act="silu",
                 n_classes=0, n_times=0, time_k=8, repeat=1, zero_final=False,
                 input_gain=1.0, rng=None):
        hidden = tuple(int(h) for h in hidden)
        if len(hidden) < 2:
            raise ValueError("need at least two hidden layers")
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        if repeat < 1:
            raise ValueError("repeat must be >= 1")
        if repeat > 1:
            if len(set(hidden[1:])) != 1 or hidden[0] != hidden[-1]:
                raise ValueError("repeated block needs equal hidden widths")
            if n_times != 2:
                raise ValueError("repeated nets carry (s, t) iteration features; set n_times=2")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden = hidden
        self.act = act
        self.n_classes = int(n_classes)
        self.n_times = int(n_times)
        self.time_k = int(time_k)
        self.repeat = int(repeat)
        self.zero_final = bool(zero_final)
        self.feat_dim = self.n_times * (self.time_k + 1)

        rng = np.random.default_rng() if rng is None else rng
        widths_in = [self.in_dim + self.n_classes, hidden[0] + self.feat_dim] + list(hidden[1:-1])
        widths_in.append(hidden[-1])
        widths_out = list(hidden) + [self.out_dim]
        self.params = []
        for fan_in, fan_out in zip(widths_in, widths_out):
            bound = 1.0 / math.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))
        # larger first-layer weights let low-dimensional inputs form sharp features
        self.params[0] *= input_gain
        self.params[1] *= input_gain
        if zero_final:
            self.params[-2][...] = 0.0
            self.params[-1][...] = 0.0
        self._acts = [ACTIVATIONS[act]] * len(hidden) + [kernels.IDENTITY]
        self._cache = None

    @property
    def n_layers(self):
        return len(self.params) // 2

    def param_count(self):
        return int(sum(p.size for p in self.params))

    def topology(self):
        return {
            "in_dim": self.in_dim, "out_dim": self.out_dim,
            "hidden": ",".join(str(h) for h in self.hidden), "act": self.act,
            "n_classes": self.n_classes, "n_times": self.n_times,
            "time_k": self.time_k, "repeat": self.repeat,
        }

    def conditioning_mode(self):
        if self.n_classes and self.n_times:
            return "both"
        if self.n_classes:
            return "class"
        if self.n_times:
            return "timesteps"
        return "none"

    def copy_params(self):
        return [p.copy() for p in self.params]

    def load_params(self, params):
        if len(params) != len(self.params):
            raise ValueError("parameter list length mismatch")
        for dst, src in zip(self.params, params):
            if dst.shape != src.shape:
                raise ValueError(f"shape mismatch {dst.shape} vs {src.shape}")
            dst[...] = src

    def _layer(self, i, x):
        W, b = self.params[2 * i], self.params[2 * i + 1]
        pre, out = kernels.dense_forward(x, W, b, self._acts[i])
        return (x, pre, out), out

    def forward(self, x, cond=None, times=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"input shape {x.shape} does not match in_dim={self.in_dim}")
        batch = x.shape[0]
        if self.n_classes:
            if cond is None:
                raise ValueError("class-conditioned net needs cond")
            cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (batch,))
            if cond.min(initial=0) < 0 or cond.max(initial=0) >= self.n_classes:
                raise ValueError("class id out of range")
            onehot = np.zeros((batch, self.n_classes))
            onehot[np.arange(batch), cond] = 1.0
            x_in = np.concatenate([x, onehot], axis=1)
        else:
            x_in = x

        if self.repeat > 1:
            if times is not None:
                raise ValueError("repeated nets take no external timesteps")
            feats = [np.broadcast_to(time_features(np.array([st]), self.time_k), (batch, self.feat_dim))
                     for st in iteration_times(self.repeat)]
        elif self.n_times:
            if times is None:
                raise ValueError("timestep-conditioned net needs times")
            times = np.asarray(times, dtype=np.float64).reshape(batch, -1)
            if times.shape[1] != self.n_times:
                raise ValueError(f"expected {self.n_times} timestep columns")
            if np.any(times < 0.0) or np.any(times > 1.0):
                raise ValueError("timesteps must lie in [0, 1]")
            feats = [time_features(times, self.time_k)]
        else:
            feats = [None]

        records = []
        rec, h = self._layer(0, x_in)
        records.append(rec)
        block = range(1, len(self.hidden))
        for e in feats:
            for j, i in enumerate(block):
                h_in = np.concatenate([h, e], axis=1) if (j == 0 and e is not None) else h
                rec, h = self._layer(i, h_in)
                records.append(rec)
        rec, y = self._layer(self.n_layers - 1, h)
        records.append(rec)
        check_finite(y, "network output")
        self._cache = records
        return y

    def backward(self, grad_out):
        """Backpropagate ``grad_out`` (dL/dy) through the cached forward pass.

        Returns ``(param_grads, input_grad)`` with ``input_grad`` shaped like
        the data input (conditioning features are not differentiated).
        """
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        records = self._cache
        grads = [np.zeros_like(p) for p in self.params]
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[:, None]
        nb = len(self.hidden) - 1
        layer_ids = [0] + list(range(1, nb + 1)) * self.repeat + [self.n_layers - 1]
        for rec, i in zip(reversed(records), reversed(layer_ids)):
            x_in, pre, out = rec
            gx, gW, gb = kernels.dense_backward(x_in, self.params[2 * i], pre, out, g, self._acts[i])
            grads[2 * i] += gW
            grads[2 * i + 1] += gb
            # conditioning features are not differentiated
            g = gx[:, :self.hidden[0]] if (i == 1 and self.feat_dim) else gx
        input_grad = g[:, :self.in_dim]
        self._cache = None
        return grads, input_grad

    def __call__(self, x, cond=None, times=None):
        return self.forward(x, cond, times)


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam. Defaults follow the adversarial setup:
    beta1 = 0, beta2 = 0.9, weight decay 0.01."""

    params: list
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: list = field(default=None)
    v: list = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in self.params]
        if self.v is None:
            self.v = [np.zeros_like(p) for p in self.params]

    def reset(self):
        for buf in self.m + self.v:
            buf[...] = 0.0
        self.step_count = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("gradient list length mismatch")
        for g in grads:
            check_finite(g, "gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_copy(self):
        return {"step": self.step_count, "m": [a.copy() for a in self.m],
                "v": [a.copy() for a in self.v]}

    def load_state(self, state):
        self.step_count = state["step"]
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


class EmaWeights:
    def __init__(self, params, decay=0.9999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")
        self.decay = decay
        self.shadow = [p.copy() for p in params]

    def update(self, params):
        if len(params) != len(self.shadow):
            raise ValueError("parameter list length mismatch")
        for s, p in zip(self.shadow, params):
            if s.shape != p.shape:
                raise ValueError("EMA shape mismatch")
            s *= self.decay
            s += (1.0 - self.decay) * p


class GradNorm:
    """Identity in the forward pass; rescales the backward gradient by a
    running RMS of its norm.

    ``square_avg`` tracks ``||g||^2 * numel`` so the normalized gradient has
    norm ``target_scale / sqrt(numel)`` at stationarity.
    """

    def __init__(self, ema_decay=0.9, eps=1e-8, target_scale=1.0):
        self.ema_decay = ema_decay
        self.eps = eps
        self.target_scale = target_scale
        self.square_avg = 0.0

    def forward(self, x):
        return x

    def backward(self, grad):
        grad = np.asarray(grad, dtype=np.float64)
        grad_sq_sum = float(np.sum(grad * grad)) * grad.size
        self.square_avg += (grad_sq_sum - self.square_avg) * (1.0 - self.ema_decay)
        scale = math.sqrt(self.square_avg) + self.eps
        return grad * (self.target_scale / scale)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = "advflow-checkpoint v1"


def save_checkpoint(path, net, ema=None, step=0, meta=None):
    """Write ``net`` (and optionally its EMA shadow) atomically to ``path``."""
    header = dict(net.topology())
    header["conditioning"] = net.conditioning_mode()
    header["step"] = int(step)
    header["has_ema"] = int(ema is not None)
    header["n_tensors"] = len(net.params)
    header["shapes"] = ";".join("x".join(str(d) for d in p.shape) for p in net.params)
    for key, val in (meta or {}).items():
        header[f"meta.{key}"] = val
    lines = [_MAGIC] + [f"{k} = {v}" for k, v in header.items()] + ["end_header", ""]
    blob = bytearray("\n".join(lines).encode("utf-8"))
    sections = [net.params] + ([ema.shadow] if ema is not None else [])
    for tensors in sections:
        for p in tensors:
            flat = np.ascontiguousarray(p, dtype="<f8").ravel()
            blob += struct.pack("<Q", flat.size)
            blob += flat.tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Return ``(net, ema_params or None, step, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    marker = b"\nend_header\n"
    end = data.find(marker)
    if end < 0 or not data.startswith(_MAGIC.encode()):
        raise ValueError(f"{path}: not an advflow checkpoint")
    header = {}
    for line in data[:end].decode("utf-8").splitlines()[1:]:
        key, _, val = line.partition(" = ")
        header[key] = val
    net = Network(
        int(header["in_dim"]), int(header["out_dim"]),
        hidden=[int(h) for h in header["hidden"].split(",")], act=header["act"],
        n_classes=int(header["n_classes"]), n_times=int(header["n_times"]),
        time_k=int(header["time_k"]), repeat=int(header["repeat"]),
        rng=np.random.default_rng(0),
    )
    shapes = [tuple(int(d) for d in s.split("x")) for s in header["shapes"].split(";")]
    pos = end + len(marker)

    def read_section():
        nonlocal pos
        out = []
        for shape in shapes:
            (count,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
            pos += 8 * count
            out.append(arr.reshape(shape))
        return out

    net.load_params(read_section())
    ema = read_section() if header["has_ema"] == "1" else None
    meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    return net, ema, int(header["step"]), meta
