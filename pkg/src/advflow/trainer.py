"""Alternating adversarial-flow training, schedules, reload techniques,
baselines and multi-step sampling."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import objectives as obj
from .flows import (ConditionalDataset, MixtureSpec, interp, mode_coverage,
                    monotonicity_violation_rate, ot_map_1d, sample, transport_cost,
                    wasserstein_1d)
from .guidance import (Classifier, ConditionalVelocity, GuidanceConfig, cg_loss_and_grad,
                       implicit_cfg_loss_and_grad, multistep_cg_loss_and_grad)
from .netcore import AdamW, EmaWeights, GradNorm, Network, NonFiniteError, check_finite

log = logging.getLogger(__name__)

REGIMES = ("single", "discrete", "any")

METRIC_COLUMNS = ("step", "loss_d", "loss_g", "lambda_ot", "transport_cost", "w1",
                  "monotonicity", "mode_coverage", "classifier_accuracy")


class ConfigError(ValueError):
    """Inconsistent or unsupported training / sampling configuration."""


class TrainingStalled(RuntimeError):
    """The discriminator stalled and no reload was available or allowed."""


@dataclass
class TrainConfig:
    # loss weights
    lambda_gp: float = 0.25
    lambda_cp: float = 0.01
    gp_eps: float = 0.01
    delta: float = 0.001
    gp_ratio: float = 0.25
    # transport weight schedule
    ot_initial: float = 0.2
    ot_final: float = 0.0
    ot_shape: str = "cosine"
    ot_duration: int = 2000
    # optimization
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.9
    weight_decay: float = 0.01
    batch_size: int = 256
    steps: int = 3000
    # model
    hidden_g: tuple = (64, 64, 64)
    hidden_d: tuple = (64, 64, 64)
    act: str = "silu"
    input_gain: float = 1.0
    time_k: int = 8
    g_kind: str = "residual"
    repeat: int = 1
    regime: str = "single"
    pairs: tuple = ()
    grad_norm: bool = True
    # training techniques
    ema_decay: float = 0.9999
    ema_reload: bool = False
    plateau_evals: int = 10
    d_reload: bool = False
    stall_gap: float = 4.0
    stall_steps: int = 200
    snapshot_every: int = 500
    ring_capacity: int = 4
    stall_abort: bool = False
    augment: str = "identity"
    augment_std: float = 0.05
    augment_final_std: Optional[float] = None
    # guidance
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0

    def __post_init__(self):
        self.hidden_g = tuple(int(h) for h in self.hidden_g)
        self.hidden_d = tuple(int(h) for h in self.hidden_d)
        self.pairs = tuple((float(s), float(t)) for s, t in self.pairs)
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown timestep regime {self.regime!r}")
        if self.ot_shape not in ("cosine", "constant"):
            raise ConfigError(f"unknown lambda_ot schedule {self.ot_shape!r}")
        if not self.ot_initial >= self.ot_final >= 0.0:
            raise ConfigError("need ot_initial >= ot_final >= 0")
        for name in ("lambda_gp", "lambda_cp"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.gp_eps <= 0 or self.delta <= 0:
            raise ConfigError("gp_eps and delta must be positive")
        if not 0.0 < self.gp_ratio <= 1.0:
            raise ConfigError("gp_ratio must lie in (0, 1]")
        if self.regime == "discrete":
            if not self.pairs:
                raise ConfigError("discrete regime needs at least one (s, t) pair")
            for s, t in self.pairs:
                if not 0.0 <= t < s <= 1.0:
                    raise ConfigError(f"pair ({s}, {t}) must satisfy 0 <= t < s <= 1")
        if self.g_kind not in ("direct", "residual"):
            raise ConfigError(f"unknown generator parameterization {self.g_kind!r}")
        if self.repeat > 1 and self.regime != "single":
            raise ConfigError("depth repetition is only supported for single-step generators")
        if self.augment not in ("identity", "jitter"):
            raise ConfigError(f"unknown augmentation {self.augment!r}")
        if self.augment_std < 0 or (self.augment_final_std is not None and self.augment_final_std < 0):
            raise ConfigError("augmentation std must be nonnegative")


def ot_schedule(cfg, step):
    if step < 0:
        raise ValueError("step must be nonnegative")
    if cfg.ot_shape == "constant":
        return cfg.ot_initial
    return cosine_ramp(cfg.ot_initial, cfg.ot_final, step, cfg.ot_duration)


def sample_timesteps(cfg, batch, rng):
    """Per-row ``(s, t)`` for the configured regime."""
    if cfg.regime == "single":
        return np.ones(batch), np.zeros(batch)
    if cfg.regime == "discrete":
        if not cfg.pairs:
            raise ConfigError("empty timestep pair set")
        pairs = np.asarray(cfg.pairs)
        idx = rng.integers(0, len(pairs), size=batch)
        return pairs[idx, 0].copy(), pairs[idx, 1].copy()
    s = rng.uniform(0.0, 1.0, size=batch)
    t = rng.uniform(0.0, 1.0, size=batch) * s
    return s, t


# -- discriminator augmentation ----------------------------------------------

def identity_augment(real, fake, rng, step=0):
    return real, fake


def cosine_ramp(start, end, step, duration):
    frac = min(step / duration, 1.0) if duration > 0 else 1.0
    return end + (start - end) * (1.0 + math.cos(math.pi * frac)) / 2.0


def make_jitter_augment(std, final_std=None, duration=0):
    """Adds the same random offset to each real/fake pair (a toy 1D transform).

    With ``final_std`` set, the offset scale decays from ``std`` to
    ``final_std`` along a cosine over ``duration`` steps.
    """

    def jitter(real, fake, rng, step=0):
        scale = std if final_std is None else cosine_ramp(std, final_std, step, duration)
        shift = scale * rng.standard_normal(real.shape)
        return real + shift, fake + shift

    return jitter


@dataclass
class Batch:
    x: np.ndarray
    c: np.ndarray
    z_src: np.ndarray
    z_tgt: np.ndarray
    n_r1: np.ndarray
    n_r2: np.ndarray
    s: np.ndarray
    t: np.ndarray
    z_cg: np.ndarray
    t_cg: np.ndarray


class RunState:
    def __init__(self, G, D, opt_g, opt_d, ema, grad_norm):
        self.G = G
        self.D = D
        self.opt_g = opt_g
        self.opt_d = opt_d
        self.ema = ema
        self.grad_norm = grad_norm
        self.step = 0
        self.ring = deque()
        self.log = []


def build_generator(cfg, dim, n_classes, rng):
    n_times = 0 if (cfg.regime == "single" and cfg.repeat == 1) else 2
    return Network(dim, dim, hidden=cfg.hidden_g, act=cfg.act, n_classes=n_classes,
                   n_times=n_times, time_k=cfg.time_k, repeat=cfg.repeat,
                   zero_final=True, input_gain=cfg.input_gain, rng=rng)


def build_discriminator(cfg, dim, n_classes, rng):
    n_times = 0 if cfg.regime == "single" else 1
    return Network(dim, 1, hidden=cfg.hidden_d, act=cfg.act, n_classes=n_classes,
                   n_times=n_times, time_k=cfg.time_k, input_gain=cfg.input_gain, rng=rng)


def generator_times(G, s, t):
    if G.n_times == 0 or G.repeat > 1:
        return None
    return np.stack([s, t], axis=1)


def apply_generator(G, x_s, s, t, c=None, kind="residual"):
    g_out = G.forward(x_s, cond=c, times=generator_times(G, s, t))
    single = G.n_times == 0 or G.repeat > 1
    return obj.generator_parameterize(g_out, x_s, None if single else s, None if single else t, kind)


class Trainer:
    """Owns one run's state and performs the alternating D / G updates.

    ``data`` is a :class:`MixtureSpec` or, for conditional runs, a
    :class:`ConditionalDataset`. ``classifier`` / ``v_guide`` are only needed
    for the corresponding guidance modes.
    """

    def __init__(self, cfg: TrainConfig, data, prior: MixtureSpec, classifier=None, v_guide=None):
        self.cfg = cfg
        self.data = data
        self.prior = prior
        self.conditional = isinstance(data, ConditionalDataset)
        self.n_classes = data.n_classes if self.conditional else 0
        self.dim = data.dim
        if prior.dim != self.dim:
            raise ConfigError("prior and data dimensions differ")
        gmode = cfg.guidance.mode
        if gmode in ("simple", "flow") and classifier is None:
            raise ConfigError(f"guidance mode {gmode!r} needs a classifier")
        if gmode == "implicit" and v_guide is None:
            raise ConfigError("implicit guidance needs a pretrained conditional velocity net")
        if gmode != "off" and not self.conditional:
            raise ConfigError("guidance needs a conditional dataset")
        self.classifier = classifier
        self.v_guide = v_guide
        seeds = np.random.SeedSequence(cfg.seed).spawn(4)
        init_rng = np.random.default_rng(seeds[0])
        self.rng_d = np.random.default_rng(seeds[1])
        self.rng_g = np.random.default_rng(seeds[2])
        self.rng_aug = np.random.default_rng(seeds[3])
        G = build_generator(cfg, self.dim, self.n_classes, init_rng)
        D = build_discriminator(cfg, self.dim, self.n_classes, init_rng)
        opt_kw = dict(beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
        self.state = RunState(
            G, D,
            AdamW(G.params, lr=cfg.lr_g, **opt_kw),
            AdamW(D.params, lr=cfg.lr_d, **opt_kw),
            EmaWeights(G.params, cfg.ema_decay),
            GradNorm(ema_decay=cfg.beta2),
        )
        self.augment = identity_augment if cfg.augment == "identity" else make_jitter_augment(
            cfg.augment_std, cfg.augment_final_std, cfg.steps)
        self._stall_count = 0
        self._best_w1 = math.inf
        self._evals_since_best = 0
        self.reload_phase = False

    # -- data -----------------------------------------------------------------

    def draw_batch(self, rng, size=None):
        cfg = self.cfg
        b = size or cfg.batch_size
        if self.conditional:
            x, c = self.data.sample(b, rng)
        else:
            x, c = sample(self.data, b, rng), None
        s, t = sample_timesteps(cfg, b, rng)
        z_src = sample(self.prior, b, rng)
        z_tgt = sample(self.prior, b, rng)
        k = obj.gp_rows(b, cfg.gp_ratio)
        n_r1 = rng.standard_normal((k, self.dim))
        n_r2 = rng.standard_normal((k, self.dim))
        z_cg = sample(self.prior, b, rng)
        t_cg = cfg.guidance.sample_t(b, rng)
        return Batch(x, c, z_src, z_tgt, n_r1, n_r2, s, t, z_cg, t_cg)

    def _d_times(self, t):
        return None if self.state.D.n_times == 0 else t[:, None]

    def _generate(self, batch):
        x_s = interp(batch.x, batch.z_src, batch.s)
        x_t = interp(batch.x, batch.z_tgt, batch.t)
        G = self.state.G
        pred = apply_generator(G, x_s, batch.s, batch.t, batch.c, self.cfg.g_kind)
        return x_s, x_t, pred

    # -- steps ----------------------------------------------------------------

    def dis_step(self, batch):
        cfg, st = self.cfg, self.state
        _, x_t, pred = self._generate(batch)
        st.G._cache = None
        real, fake = self.augment(x_t, pred, self.rng_aug, st.step)
        b = len(real)
        k = obj.gp_rows(b, cfg.gp_ratio)
        w = obj.weighting(batch.s, batch.t, cfg.delta)
        real_gp = real[:k] + cfg.gp_eps * batch.n_r1[:k]
        fake_gp = fake[:k] + cfg.gp_eps * batch.n_r2[:k]
        inputs = np.concatenate([real, fake, real_gp, fake_gp])
        cond = None if batch.c is None else np.concatenate([batch.c, batch.c, batch.c[:k], batch.c[:k]])
        times = None if st.D.n_times == 0 else np.concatenate(
            [batch.t, batch.t, batch.t[:k], batch.t[:k]])[:, None]
        logits = st.D.forward(inputs, cond=cond, times=times)
        lr_, lf_ = logits[:b], logits[b:2 * b]
        lrg, lfg = logits[2 * b:2 * b + k], logits[2 * b + k:]

        adv, g_r, g_f = obj.relativistic(lr_, lf_)
        scale = cfg.lambda_gp * w[:k] / cfg.gp_eps ** 2
        r1, g_r1b, g_r1s = obj.fd_penalty_terms(lr_[:k], lrg, scale)
        r2, g_r2b, g_r2s = obj.fd_penalty_terms(lf_[:k], lfg, scale)
        cp, g_cr, g_cf = obj.logit_centering_terms(lr_, lf_)
        upstream = np.zeros_like(logits)
        upstream[:b] = g_r + cfg.lambda_cp * g_cr
        upstream[b:2 * b] = g_f + cfg.lambda_cp * g_cf
        upstream[:k] += g_r1b
        upstream[b:b + k] += g_r2b
        upstream[2 * b:2 * b + k] = g_r1s
        upstream[2 * b + k:] = g_r2s
        total = adv + r1 + r2 + cfg.lambda_cp * cp
        if not math.isfinite(total):
            raise NonFiniteError(f"discriminator loss is {total} at step {st.step}")
        grads, _ = st.D.backward(upstream)
        st.opt_d.step(grads)
        return {"loss_d": total, "d_adv": adv, "r1": r1, "r2": r2, "cp": cp,
                "gap": float(np.mean(lr_ - lf_))}

    def gen_step(self, batch, lambda_ot=None):
        cfg, st = self.cfg, self.state
        lam = ot_schedule(cfg, st.step) if lambda_ot is None else lambda_ot
        x_s, x_t, pred = self._generate(batch)
        b = len(pred)
        real, fake = self.augment(x_t, st.grad_norm.forward(pred) if cfg.grad_norm else pred,
                                  self.rng_aug, st.step)
        cond = None if batch.c is None else np.concatenate([batch.c, batch.c])
        times = None if st.D.n_times == 0 else np.concatenate([batch.t, batch.t])[:, None]
        logits = st.D.forward(np.concatenate([fake, real]), cond=cond, times=times)
        adv, g_f, _ = obj.relativistic(logits[:b], logits[b:])
        upstream = np.zeros_like(logits)
        upstream[:b] = g_f
        _, in_grad = st.D.backward(upstream)
        # augmentations here are additive, so the pair transform passes gradients through
        d_pred = in_grad[:b]
        if cfg.grad_norm:
            d_pred = st.grad_norm.backward(d_pred)

        multi = st.G.n_times > 0 and st.G.repeat == 1
        s_arg = batch.s if multi else None
        t_arg = batch.t if multi else None
        ot, d_ot = obj.ot_loss_and_grad(pred, x_s, s_arg, t_arg, cfg.delta)
        total = adv + lam * ot
        d_pred = d_pred + lam * d_ot

        cg = 0.0
        gmode = cfg.guidance.mode
        if gmode != "off" and cfg.guidance.lambda_cg > 0:
            lam_cg = cfg.guidance.lambda_cg
            if gmode == "implicit":
                cg, d_cg = implicit_cfg_loss_and_grad(self.v_guide, pred, batch.c, batch.z_cg, batch.t_cg)
            elif multi:
                cg, d_cg = multistep_cg_loss_and_grad(self.classifier, pred, batch.t, batch.c,
                                                      cfg.guidance.t_set)
            else:
                cg, d_cg = cg_loss_and_grad(self.classifier, pred, batch.c, batch.z_cg, batch.t_cg, gmode)
            total += lam_cg * cg
            d_pred = d_pred + lam_cg * d_cg

        if not math.isfinite(total):
            raise NonFiniteError(f"generator loss is {total} at step {st.step}")
        d_g = obj.generator_parameterize_grad(d_pred, s_arg, t_arg, cfg.g_kind)
        grads, _ = st.G.backward(d_g)
        st.opt_g.step(grads)
        st.ema.update(st.G.params)
        return {"loss_g": total, "g_adv": adv, "ot": ot, "cg": cg, "lambda_ot": lam}

    def train_step(self, batch, mode):
        if mode == "dis":
            return self.dis_step(batch)
        if mode == "gen":
            return self.gen_step(batch)
        raise ValueError(f"mode must be 'dis' or 'gen', got {mode!r}")

    def iteration(self):
        """One D update then one G update on independently drawn batches."""
        st = self.state
        d = self.dis_step(self.draw_batch(self.rng_d))
        g = self.gen_step(self.draw_batch(self.rng_g))
        st.step += 1
        rec = {**d, **g, "step": st.step}
        if self.cfg.d_reload or self.cfg.stall_abort:
            self._d_reload_policy(rec)
        return rec

    # -- reload techniques ----------------------------------------------------

    def snapshot_d(self):
        st = self.state
        st.ring.append((st.step, st.D.copy_params(), st.opt_d.state_copy()))
        while len(st.ring) > self.cfg.ring_capacity:
            st.ring.popleft()

    def d_reload(self, index=0):
        st = self.state
        if not st.ring or not -len(st.ring) <= index < len(st.ring):
            raise IndexError(f"no discriminator snapshot at index {index}")
        _, params, opt_state = st.ring[index]
        st.D.load_params(params)
        st.opt_d.load_state(opt_state)

    def _d_reload_policy(self, rec):
        st, cfg = self.state, self.cfg
        if cfg.d_reload and st.step % cfg.snapshot_every == 0:
            self.snapshot_d()
        if rec["gap"] > cfg.stall_gap:
            self._stall_count += 1
        else:
            self._stall_count = 0
        if self._stall_count < cfg.stall_steps:
            return
        if cfg.d_reload and st.ring:
            log.info("discriminator stalled at step %d; reloading oldest snapshot", st.step)
            self.d_reload(0)
            self._stall_count = 0
            rec["d_reloaded"] = 1
        elif cfg.stall_abort:
            raise TrainingStalled(f"logit gap above {cfg.stall_gap} for {cfg.stall_steps} steps at step {st.step}")

    def ema_reload(self):
        st = self.state
        st.G.load_params(st.ema.shadow)
        st.opt_g.reset()

    def note_eval(self, w1):
        """Feed an eval W1 to the plateau detector driving EMA reloads."""
        if not self.cfg.ema_reload:
            return
        if w1 < self._best_w1:
            self._best_w1 = w1
            self._evals_since_best = 0
        else:
            self._evals_since_best += 1
        if not self.reload_phase and self._evals_since_best >= self.cfg.plateau_evals:
            self.reload_phase = True
            self.state.opt_g.lr *= 0.5
            log.info("EMA plateau at step %d; entering reload phase", self.state.step)
        if self.reload_phase:
            self.ema_reload()

    # -- evaluation -----------------------------------------------------------

    def ema_generator(self):
        G = self.state.G
        H = Network(G.in_dim, G.out_dim, hidden=G.hidden, act=G.act, n_classes=G.n_classes,
                    n_times=G.n_times, time_k=G.time_k, repeat=G.repeat, rng=np.random.default_rng(0))
        H.load_params(self.state.ema.shadow)
        return H

    def schedule(self):
        """Sampling schedule matching the trained regime."""
        if self.cfg.regime == "discrete":
            return chain_schedule(self.cfg.pairs)
        return (1.0, 0.0)

    def fit(self, steps=None, eval_every=0, evaluator=None, callback=None):
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            rec = self.iteration()
            if eval_every and evaluator is not None and self.state.step % eval_every == 0:
                metrics = evaluator(self)
                rec.update(metrics)
                self.state.log.append(rec)
                self.note_eval(metrics.get("w1", math.inf))
            if callback is not None:
                callback(self, rec)
        return self.state


def chain_schedule(pairs):
    """Turn a discrete pair set into the strictly decreasing schedule 1 -> 0."""
    nxt = {s: t for s, t in pairs}
    sched = [1.0]
    while sched[-1] > 0.0:
        if sched[-1] not in nxt:
            raise ConfigError("trained timestep pairs do not chain from 1 to 0")
        sched.append(nxt[sched[-1]])
        if len(sched) > len(pairs) + 1:
            raise ConfigError("timestep pairs form a cycle")
    return tuple(sched)


def sample_generator(G, x, schedule=(1.0, 0.0), cond=None, kind="residual", trained_pairs=None):
    """Run ``x <- G(x, s_i, s_{i+1})`` along a strictly decreasing schedule.

    ``trained_pairs``: for discrete-regime generators, the pairs seen in
    training; any other pair raises :class:`ConfigError`. Single-step nets
    (no timestep input) only accept the schedule ``(1, 0)``.
    """
    sched = [float(v) for v in schedule]
    if len(sched) < 2 or sched[0] != 1.0 or sched[-1] != 0.0:
        raise ConfigError("schedule must start at 1 and end at 0")
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise ConfigError("schedule must be strictly decreasing")
    single = G.n_times == 0 or G.repeat > 1
    if single and len(sched) != 2:
        raise ConfigError("single-step generator only supports the schedule (1, 0)")
    if trained_pairs is not None:
        seen = {(round(s, 12), round(t, 12)) for s, t in trained_pairs}
        for pair in zip(sched, sched[1:]):
            if (round(pair[0], 12), round(pair[1], 12)) not in seen:
                raise ConfigError(f"timestep pair {pair} was not seen in training")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    for s, t in zip(sched, sched[1:]):
        sv = np.full(len(x), s)
        tv = np.full(len(x), t)
        x = apply_generator(G, x, sv, tv, cond, kind)
    return x


def evaluate_1d(G, data, prior, rng, count=10000, kind="residual", schedule=(1.0, 0.0),
                grid=None, trained_pairs=None):
    """Distribution and transport metrics of a 1D unconditional generator."""
    z = sample(prior, count, rng)
    gz = sample_generator(G, z, schedule, kind=kind, trained_pairs=trained_pairs)
    x = sample(data, count, rng)
    grid = np.linspace(-3.0, 3.0, 601) if grid is None else grid
    g_grid = sample_generator(G, grid[:, None], schedule, kind=kind, trained_pairs=trained_pairs)[:, 0]
    oracle = ot_map_1d(data, prior, grid)
    data_std = float(data.std()[0])
    return {
        "w1": wasserstein_1d(gz, x),
        "transport_cost": transport_cost(z, gz),
        "monotonicity": monotonicity_violation_rate(grid, g_grid),
        "mode_coverage": mode_coverage(gz, data, 3.0),
        "map_error": float(np.mean(np.abs(g_grid - oracle))) / data_std,
    }


def make_evaluator(data, prior, count=4000, seed=12345):
    """Evaluator callback for :meth:`Trainer.fit` that scores the EMA generator."""

    def evaluator(tr):
        rng = np.random.default_rng(seed)
        if tr.conditional:
            x, c = data.sample(count, rng)
            z = sample(prior, count, rng)
            G = tr.ema_generator()
            gz = sample_generator(G, z, tr.schedule(), cond=c, kind=tr.cfg.g_kind)
            out = {"w1": wasserstein_1d(gz, x), "transport_cost": transport_cost(z, gz),
                   "monotonicity": float("nan"),
                   "mode_coverage": float(np.min(mode_coverage(gz, data.marginal(), 3.0)))}
            if tr.classifier is not None:
                out["classifier_accuracy"] = tr.classifier.accuracy(gz, c)
            return out
        m = evaluate_1d(tr.ema_generator(), data, prior, rng, count=count,
                        kind=tr.cfg.g_kind, schedule=tr.schedule())
        m["mode_coverage"] = float(np.min(m["mode_coverage"]))
        return m

    return evaluator


# -- baselines -----------------------------------------------------------------

@dataclass
class FMConfig:
    hidden: tuple = (64, 64, 64)
    act: str = "silu"
    input_gain: float = 1.0
    time_k: int = 8
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 3000
    seed: int = 0
    cfg_dropout: float = 0.0


class FlowMatchingModel:
    """Velocity net ``v(x_t, t)`` trained on ``z - x`` with an Euler sampler."""

    def __init__(self, net, n_classes=0):
        self.net = net
        self.n_classes = n_classes

    def velocity(self, x, t, c=None):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
        cond = None
        if self.net.n_classes:
            cond = np.full(len(x), self.n_classes) if c is None else c
        return self.net.forward(x, cond=cond, times=t[:, None])

    def sample(self, z, nfe=64, c=None):
        x = np.asarray(z, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        ts = np.linspace(1.0, 0.0, nfe + 1)
        for a, b in zip(ts, ts[1:]):
            x = x - (a - b) * self.velocity(x, a, c)
        return x

    def guide(self):
        if not self.net.n_classes:
            raise ConfigError("unconditional flow model cannot provide implicit guidance")
        return ConditionalVelocity(self.net, self.n_classes)


def train_baseline_fm(data, prior, cfg: FMConfig = None, callback=None):
    """Flow matching on random ``(x, z)`` pairings. Conditional datasets get a
    null class so the model can also run unconditionally (dropout ``cfg_dropout``).

    ``callback(step, loss, model)`` runs after every update.
    """
    cfg = cfg or FMConfig()
    rng = np.random.default_rng(cfg.seed)
    conditional = isinstance(data, ConditionalDataset)
    n_classes = data.n_classes if conditional else 0
    net = Network(data.dim, data.dim, hidden=cfg.hidden, act=cfg.act,
                  n_classes=n_classes + 1 if conditional else 0, n_times=1,
                  time_k=cfg.time_k, input_gain=cfg.input_gain, rng=rng)
    opt = AdamW(net.params, lr=cfg.lr, beta1=0.9, beta2=0.999, weight_decay=0.0)
    model = FlowMatchingModel(net, n_classes)
    for step in range(1, cfg.steps + 1):
        if conditional:
            x, c = data.sample(cfg.batch_size, rng)
            drop = rng.uniform(size=cfg.batch_size) < cfg.cfg_dropout
            c = np.where(drop, n_classes, c)
        else:
            x, c = sample(data, cfg.batch_size, rng), None
        z = sample(prior, cfg.batch_size, rng)
        t = rng.uniform(size=cfg.batch_size)
        v = net.forward(interp(x, z, t), cond=c, times=t[:, None])
        loss, grad = obj.fm_loss_and_grad(v, x, z)
        check_finite(np.array(loss), "flow-matching loss")
        grads, _ = net.backward(grad)
        opt.step(grads)
        if callback is not None:
            callback(step, loss, model)
    return model


def train_baseline_gan(cfg: TrainConfig, data, prior, steps=None, **kw):
    """Adversarial flow with the transport weight pinned to zero."""
    gan_cfg = replace(cfg, ot_initial=0.0, ot_final=0.0, ot_shape="constant")
    tr = Trainer(gan_cfg, data, prior, **kw)
    tr.fit(steps)
    return tr
