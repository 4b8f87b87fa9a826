"""Experiment runner: run-config parsing, training / eval / sampling dispatch,
CSV metric logs, checkpoints and SVG plots.

Run configs are UTF-8 text, one ``key = value`` per line, ``#`` comments.
Example::

    name = af_three_mode
    method = af
    data = three_mode
    prior = normal
    train.lambda_ot.initial = 0.8
    train.hidden_g = 48, 48, 48
"""
from __future__ import annotations

import argparse
import ast
import csv
import glob
import logging
import math
import os
import re
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Union

import numpy as np

from . import flows, svgplot
from .flows import ConditionalDataset, MixtureSpec
from .guidance import GuidanceConfig, train_classifier
from .netcore import NonFiniteError, load_checkpoint, save_checkpoint
from .trainer import (METRIC_COLUMNS, ConfigError, FMConfig, FlowMatchingModel, Trainer,
                      TrainConfig, TrainingStalled, chain_schedule, sample_generator,
                      train_baseline_fm)

log = logging.getLogger("advflow")

OUTPUT_ENV = "ADVFLOW_OUTPUT"
METHODS = ("af", "gan", "fm")
PRESETS = ("fig1", "fig3", "fig4", "fig13")

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_STALLED = 4
EXIT_EXISTS = 5


class RunExists(FileExistsError):
    """The run directory already holds a completed or started run."""


# -- mixture text format --------------------------------------------------------

_TERM = re.compile(r"\s*(?P<w>[^*\s]+)\s*\*\s*N\((?P<args>[^()]*)\)\s*")


def parse_mixture(text):
    """Parse ``w*N(mu, sd) + w*N([mu1, mu2], [sd1, sd2]) + ...``."""
    pos, comps = 0, []
    text = text.strip()
    while True:
        m = _TERM.match(text, pos)
        if m is None:
            raise ConfigError(f"cannot parse mixture term at {text[pos:]!r}")
        try:
            w = float(m.group("w"))
            mu, sd = ast.literal_eval(f"({m.group('args')})")
        except (ValueError, SyntaxError, TypeError) as exc:
            raise ConfigError(f"bad mixture term {m.group(0).strip()!r}") from exc
        comps.append((w, np.atleast_1d(np.asarray(mu, dtype=float)),
                      np.atleast_1d(np.asarray(sd, dtype=float))))
        pos = m.end()
        if pos == len(text):
            break
        if text[pos] != "+":
            raise ConfigError(f"expected '+' in mixture at {text[pos:]!r}")
        pos += 1
    dims = {len(mu) for _, mu, _ in comps}
    if len(dims) != 1:
        raise ConfigError("mixture components disagree on dimension")
    try:
        return MixtureSpec(np.array([c[0] for c in comps]), np.array([c[1] for c in comps]),
                           np.array([np.broadcast_to(c[2], c[1].shape) for c in comps]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def format_mixture(spec):
    def vec(v):
        return repr(float(v[0])) if len(v) == 1 else "[" + ", ".join(repr(float(a)) for a in v) + "]"

    return " + ".join(f"{float(w)!r}*N({vec(mu)}, {vec(sd)})"
                      for w, mu, sd in zip(spec.weights, spec.means, spec.stds))


def _normalize_dist(text):
    text = text.strip()
    if text in flows.BENCHMARKS or text in flows.CONDITIONAL_BENCHMARKS:
        return text
    if "|" in text:
        return " | ".join(format_mixture(parse_mixture(p)) for p in text.split("|"))
    return format_mixture(parse_mixture(text))


def resolve_dist(text, class_weights=(), dim=None):
    """Benchmark name or mixture text -> MixtureSpec / ConditionalDataset.

    ``|`` separates per-class mixtures. ``normal`` takes ``dim`` if given.
    """
    text = text.strip()
    if text == "normal" and dim is not None:
        return flows.standard_normal(dim)
    if text in flows.BENCHMARKS:
        return flows.BENCHMARKS[text]()
    if text in flows.CONDITIONAL_BENCHMARKS:
        return flows.CONDITIONAL_BENCHMARKS[text]()
    if "|" in text:
        classes = [parse_mixture(p) for p in text.split("|")]
        cw = np.asarray(class_weights, dtype=float) if len(class_weights) else np.full(len(classes), 1.0 / len(classes))
        try:
            return ConditionalDataset(tuple(classes), cw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return parse_mixture(text)


# -- run config ---------------------------------------------------------------------

@dataclass
class RunConfig:
    name: str
    method: str
    data: str
    prior: str = "normal"
    class_weights: tuple = ()
    seed: int = 0
    train: Union[TrainConfig, FMConfig] = field(default_factory=TrainConfig)
    eval_every: int = 500
    eval_count: int = 4000
    eval_seed: int = 12345
    eval_nfe: int = 64
    eval_ema: bool = True
    output_dir: str = ""
    classifier_steps: int = 2000
    classifier_hidden: tuple = (64, 64)
    classifier_lr: float = 3e-3
    guide_steps: int = 3000
    guide_dropout: float = 0.1


_OT_KEYS = {"initial": "ot_initial", "final": "ot_final", "shape": "ot_shape", "duration": "ot_duration"}
_TOP = {"name": str, "method": str, "data": str, "prior": str, "class_weights": "floats",
        "seed": int, "output.dir": str}
_SECTION = {
    "eval.every": ("eval_every", int), "eval.count": ("eval_count", int),
    "eval.seed": ("eval_seed", int), "eval.nfe": ("eval_nfe", int), "eval.ema": ("eval_ema", bool),
    "classifier.steps": ("classifier_steps", int), "classifier.hidden": ("classifier_hidden", "ints"),
    "classifier.lr": ("classifier_lr", float), "guide.steps": ("guide_steps", int),
    "guide.dropout": ("guide_dropout", float),
}
_GUIDANCE = {"mode": str, "lambda_cg": float, "t_lo": float, "t_hi": float, "t_set": "floats"}
_SPECIAL_TYPES = {"hidden_g": "ints", "hidden_d": "ints", "hidden": "ints", "pairs": "pairs",
                  "augment_final_std": "optfloat"}


def _field_kind(cls, name):
    if name in _SPECIAL_TYPES:
        return _SPECIAL_TYPES[name]
    default = {f.name: f.default for f in fields(cls)}[name]
    return type(default)


def _convert(key, raw, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
                return raw[1:-1]
            return raw
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind == "optfloat":
            return None if raw.lower() == "none" else float(raw)
        if kind == "pairs":
            out = []
            for item in raw.split(","):
                if item.strip():
                    s, t = item.split(":")
                    out.append((float(s), float(t)))
            return tuple(out)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from exc
    raise ConfigError(f"{key}: unsupported value kind")


def _af_train_keys():
    keys = {}
    for f in fields(TrainConfig):
        if f.name in ("guidance", "seed") or f.name.startswith("ot_"):
            continue
        keys[f"train.{f.name}"] = f.name
    for sub, name in _OT_KEYS.items():
        keys[f"train.lambda_ot.{sub}"] = name
    return keys


def _fm_train_keys():
    return {f"train.{f.name}": f.name for f in fields(FMConfig) if f.name != "seed"}


def parse_config(text):
    """Parse and validate a run config; unknown keys are errors."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        raw[key] = val.strip()

    for req in ("name", "method", "data"):
        if req not in raw:
            raise ConfigError(f"missing required key {req}")
    method = raw["method"].strip()
    if method not in METHODS:
        raise ConfigError(f"method: expected one of {', '.join(METHODS)}, got {method!r}")

    af_keys, fm_keys = _af_train_keys(), _fm_train_keys()
    train_keys = fm_keys if method == "fm" else af_keys
    top, run_kw, train_kw, guide_kw = {}, {}, {}, {}
    for key, val in raw.items():
        if key in _TOP:
            top[key] = _convert(key, val, _TOP[key])
        elif key in _SECTION:
            attr, kind = _SECTION[key]
            run_kw[attr] = _convert(key, val, kind)
        elif key.startswith("guidance."):
            sub = key[len("guidance."):]
            if sub not in _GUIDANCE:
                raise ConfigError(f"unknown key {key}")
            if method == "fm":
                raise ConfigError(f"{key} is not valid for method fm")
            guide_kw[sub] = _convert(key, val, _GUIDANCE[sub])
        elif key in train_keys:
            if method == "gan" and key.startswith("train.lambda_ot."):
                raise ConfigError(f"{key} is not valid for method gan (the transport weight is zero)")
            cls = FMConfig if method == "fm" else TrainConfig
            name = train_keys[key]
            train_kw[name] = _convert(key, val, _field_kind(cls, name))
        elif key in af_keys or key in fm_keys:
            raise ConfigError(f"{key} is not valid for method {method}")
        else:
            raise ConfigError(f"unknown key {key}")

    name = top["name"]
    if not re.fullmatch(r"[A-Za-z0-9_.-]+", name):
        raise ConfigError("name: use letters, digits, '_', '-', '.' only")
    try:
        if method == "fm":
            train = FMConfig(**train_kw)
        else:
            if method == "gan":
                train_kw.update(ot_initial=0.0, ot_final=0.0, ot_shape="constant")
            train = TrainConfig(guidance=GuidanceConfig(**guide_kw), **train_kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    cfg = RunConfig(
        name=name, method=method,
        data=_normalize_dist(top["data"]),
        prior=_normalize_dist(top.get("prior", "normal")),
        class_weights=top.get("class_weights", ()),
        seed=top.get("seed", 0), train=train, output_dir=top.get("output.dir", ""), **run_kw,
    )
    _validate(cfg)
    return cfg


def _validate(cfg):
    for attr in ("eval_every", "eval_count", "eval_nfe", "classifier_steps", "guide_steps"):
        if getattr(cfg, attr) <= 0:
            raise ConfigError(f"{attr} must be positive")
    data = resolve_dist(cfg.data, cfg.class_weights)
    prior = resolve_dist(cfg.prior, dim=data.dim)
    if isinstance(prior, ConditionalDataset):
        raise ConfigError("prior must be a single mixture")
    if prior.dim != data.dim:
        raise ConfigError("prior and data dimensions differ")
    if cfg.class_weights and not isinstance(data, ConditionalDataset):
        raise ConfigError("class_weights needs per-class data ('|'-separated mixtures)")


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join(f"{s!r}:{t!r}" for s, t in v)
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    return str(v)


def serialize_config(cfg):
    """Canonical text form; ``parse_config(serialize_config(c)) == c``."""
    lines = [f"name = {cfg.name}", f"method = {cfg.method}", f"data = {cfg.data}",
             f"prior = {cfg.prior}", f"seed = {cfg.seed}"]
    if cfg.class_weights:
        lines.append(f"class_weights = {_fmt_value(cfg.class_weights)}")
    if cfg.output_dir:
        lines.append(f"output.dir = {cfg.output_dir}")
    for key, (attr, _) in _SECTION.items():
        lines.append(f"{key} = {_fmt_value(getattr(cfg, attr))}")
    if cfg.method == "fm":
        for key, name in _fm_train_keys().items():
            lines.append(f"{key} = {_fmt_value(getattr(cfg.train, name))}")
    else:
        for key, name in _af_train_keys().items():
            if cfg.method == "gan" and key.startswith("train.lambda_ot."):
                continue
            lines.append(f"{key} = {_fmt_value(getattr(cfg.train, name))}")
        for sub in _GUIDANCE:
            lines.append(f"guidance.{sub} = {_fmt_value(getattr(cfg.train.guidance, sub))}")
    return "\n".join(lines) + "\n"


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# -- evaluation helpers ----------------------------------------------------------------

def _fmt_csv(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def _map_grid(prior):
    lo, hi = prior.support()
    return np.linspace(max(-3.0, lo[0]), min(3.0, hi[0]), 601)


def score(gen, data, prior, rng, count, classifier=None):
    """Metric columns for a sampler ``gen(z, c) -> x``."""
    conditional = isinstance(data, ConditionalDataset)
    if conditional:
        x, c = data.sample(count, rng)
        marginal = data.marginal()
    else:
        x, c = flows.sample(data, count, rng), None
        marginal = data
    z = flows.sample(prior, count, rng)
    gz = gen(z, c)
    out = {
        "w1": flows.wasserstein_1d(gz[:, 0], x[:, 0]) if data.dim == 1 else float(np.mean(
            [flows.wasserstein_1d(gz[:, j], x[:, j]) for j in range(data.dim)])),
        "transport_cost": flows.transport_cost(z, gz),
        "monotonicity": math.nan,
        "mode_coverage": float(np.min(flows.mode_coverage(gz, marginal, 3.0))),
        "classifier_accuracy": math.nan,
    }
    if data.dim == 1 and not conditional:
        grid = _map_grid(prior)
        out["monotonicity"] = flows.monotonicity_violation_rate(grid, gen(grid[:, None], None)[:, 0])
        out["map_error"] = float(np.mean(np.abs(gen(grid[:, None], None)[:, 0]
                                                - flows.ot_map_1d(data, prior, grid)))) / float(data.std()[0])
    if classifier is not None and conditional:
        out["classifier_accuracy"] = classifier.accuracy(gz, c)
    return out


def _af_sampler(G, schedule, kind, trained_pairs=None):
    def gen(z, c):
        return sample_generator(G, z, schedule, cond=c, kind=kind, trained_pairs=trained_pairs)
    return gen


def _fm_sampler(model, nfe):
    def gen(z, c):
        return model.sample(z, nfe, c)
    return gen


def af_schedule(regime, pairs, nfe):
    """Sampling schedule for ``nfe`` generator calls in the given regime."""
    if nfe < 1:
        raise ConfigError("nfe must be at least 1")
    if regime == "discrete":
        sched = chain_schedule(pairs)
        if nfe != len(sched) - 1:
            raise ConfigError(f"discrete model trained for {len(sched) - 1} steps; nfe={nfe} "
                              "would use timestep pairs unseen in training")
        return sched
    if regime == "single" and nfe != 1:
        raise ConfigError("single-step generator only supports nfe=1")
    return tuple(np.linspace(1.0, 0.0, nfe + 1))


# -- artifacts -----------------------------------------------------------------------

def output_root(cfg=None, override=None):
    if override:
        return Path(override)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def run_dir(cfg, root=None):
    return output_root(cfg, root) / cfg.name / f"seed{cfg.seed}"


def checkpoint_name(step):
    return f"model-step{step:06d}.ckpt"


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt_csv(v) for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header = rows[0]
    cols = {h: [] for h in header}
    for row in rows[1:]:
        for h, v in zip(header, row):
            cols[h].append(float(v) if v else math.nan)
    return header, cols


def plot_csv(path, title=None):
    """Regenerate the SVG belonging to a metrics / map / samples CSV."""
    path = Path(path)
    header, cols = read_csv(path)
    title = title or path.parent.parent.name
    if "oracle" in header:
        svg = svgplot.line_plot(
            [("G(z)", list(zip(cols["z"], cols["generated"])), False),
             ("oracle T*(z)", list(zip(cols["z"], cols["oracle"])), True)],
            title=f"{title}: learned map", xlabel="z", ylabel="G(z)")
        out = path.with_suffix(".svg")
    elif "data_density" in header:
        left = cols["bin_left"]
        svg = svgplot.line_plot(
            [("generated", list(zip(left, cols["generated_density"])), False),
             ("data", list(zip(left, cols["data_density"])), True)],
            title=f"{title}: samples", xlabel="x", ylabel="density", steps=True)
        out = path.with_name("hist.svg")
    elif "loss_d" in header:
        svg = svgplot.line_plot(
            [(name, list(zip(cols["step"], cols[name])), i > 0)
             for i, name in enumerate(("loss_d", "loss_g", "w1"))],
            title=f"{title}: losses", xlabel="step", ylabel="value")
        out = path.with_name("losses.svg")
    else:
        raise ValueError(f"{path}: unrecognised CSV layout")
    out.write_text(svg, encoding="utf-8")
    return out


def _write_final_artifacts(rd, gen, data, prior, seed):
    rng = np.random.default_rng(seed)
    outs = []
    if data.dim == 1 and not isinstance(data, ConditionalDataset):
        grid = _map_grid(prior)
        write_csv(rd / "map.csv", ("z", "generated", "oracle"),
                  zip(grid, gen(grid[:, None], None)[:, 0], flows.ot_map_1d(data, prior, grid)))
        outs.append(plot_csv(rd / "map.csv"))
    count = 20000
    if isinstance(data, ConditionalDataset):
        x, c = data.sample(count, rng)
    else:
        x, c = flows.sample(data, count, rng), None
    gz = gen(flows.sample(prior, count, rng), c)
    lo = min(np.quantile(x[:, 0], 0.001), np.quantile(gz[:, 0], 0.001))
    hi = max(np.quantile(x[:, 0], 0.999), np.quantile(gz[:, 0], 0.999))
    edges = np.linspace(lo, hi, 121)
    hg, _ = np.histogram(gz[:, 0], bins=edges, density=True)
    hd, _ = np.histogram(x[:, 0], bins=edges, density=True)
    write_csv(rd / "samples.csv", ("bin_left", "bin_right", "generated_density", "data_density"),
              zip(edges[:-1], edges[1:], hg, hd))
    outs.append(plot_csv(rd / "samples.csv"))
    return outs


def _prepare_run_dir(rd, force):
    if rd.exists() and any(rd.iterdir()):
        if not force:
            raise RunExists(f"{rd} already holds a run; pass --force to overwrite")
        shutil.rmtree(rd)
    rd.mkdir(parents=True, exist_ok=True)


def _meta(cfg, extra=None):
    meta = {"name": cfg.name, "method": cfg.method, "seed": cfg.seed, "data": cfg.data,
            "prior": cfg.prior}
    if cfg.class_weights:
        meta["class_weights"] = _fmt_value(cfg.class_weights)
    meta.update(extra or {})
    return meta


def run_experiment(cfg: RunConfig, root=None, force=False):
    """Train one run and write its artifacts; returns an exit status."""
    rd = run_dir(cfg, root)
    _prepare_run_dir(rd, force)
    (rd / "run.cfg").write_text(serialize_config(cfg), encoding="utf-8")
    data = resolve_dist(cfg.data, cfg.class_weights)
    prior = resolve_dist(cfg.prior, dim=data.dim)
    metrics_path = rd / "metrics.csv"
    fh = open(metrics_path, "w", newline="", encoding="utf-8")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    fh.flush()

    def emit(rec):
        writer.writerow([_fmt_csv(rec.get(col, math.nan)) for col in METRIC_COLUMNS])
        fh.flush()

    status = EXIT_OK
    try:
        if cfg.method == "fm":
            gen = _run_fm(cfg, data, prior, rd, emit)
        else:
            gen = _run_af(cfg, data, prior, rd, emit)
    except NonFiniteError as exc:
        log.error("%s: %s", cfg.name, exc)
        status = EXIT_NONFINITE
    except TrainingStalled as exc:
        log.error("%s: %s", cfg.name, exc)
        status = EXIT_STALLED
    finally:
        fh.close()
    if status == EXIT_OK:
        _write_final_artifacts(rd, gen, data, prior, cfg.eval_seed)
    plot_csv(metrics_path)
    (rd / "status").write_text({EXIT_OK: "complete", EXIT_NONFINITE: "nonfinite",
                                EXIT_STALLED: "stalled"}[status] + "\n", encoding="utf-8")
    return status


def _run_af(cfg, data, prior, rd, emit):
    tcfg = replace(cfg.train, seed=cfg.seed)
    clf = v_guide = None
    mode = tcfg.guidance.mode
    if mode in ("simple", "flow"):
        clf = train_classifier(data, prior, steps=cfg.classifier_steps, lr=cfg.classifier_lr,
                               hidden=cfg.classifier_hidden, seed=cfg.seed)
    elif mode == "implicit":
        fm = train_baseline_fm(data, prior, FMConfig(steps=cfg.guide_steps, seed=cfg.seed,
                                                     cfg_dropout=cfg.guide_dropout))
        v_guide = fm.guide()
    tr = Trainer(tcfg, data, prior, classifier=clf, v_guide=v_guide)
    pairs = tcfg.pairs if tcfg.regime == "discrete" else None

    def evaluator(t):
        G = t.ema_generator() if cfg.eval_ema else t.state.G
        return score(_af_sampler(G, t.schedule(), tcfg.g_kind, pairs), data, prior,
                     np.random.default_rng(cfg.eval_seed), cfg.eval_count, clf)

    def callback(t, rec):
        if "w1" in rec:
            emit(rec)

    tr.fit(tcfg.steps, eval_every=cfg.eval_every, evaluator=evaluator, callback=callback)
    st = tr.state
    extra = {"regime": tcfg.regime, "g_kind": tcfg.g_kind,
             "pairs": _fmt_value(tcfg.pairs) if tcfg.pairs else ""}
    save_checkpoint(rd / checkpoint_name(st.step), st.G, ema=st.ema, step=st.step,
                    meta=_meta(cfg, extra))
    G = tr.ema_generator() if cfg.eval_ema else st.G
    return _af_sampler(G, tr.schedule(), tcfg.g_kind, pairs)


def _run_fm(cfg, data, prior, rd, emit):
    fcfg = replace(cfg.train, seed=cfg.seed)

    def callback(step, loss, model):
        if step % cfg.eval_every == 0:
            rec = score(_fm_sampler(model, cfg.eval_nfe), data, prior,
                        np.random.default_rng(cfg.eval_seed), cfg.eval_count)
            rec.update(step=step, loss_g=loss)
            emit(rec)

    model = train_baseline_fm(data, prior, fcfg, callback=callback)
    save_checkpoint(rd / checkpoint_name(fcfg.steps), model.net, step=fcfg.steps,
                    meta=_meta(cfg, {"n_classes": model.n_classes}))
    return _fm_sampler(model, cfg.eval_nfe)


# -- checkpoints: eval and sample ---------------------------------------------------

def _load_generator(path, use_ema=True):
    net, ema, step, meta = load_checkpoint(path)
    if use_ema and ema is not None:
        net.load_params(ema)
    return net, step, meta


def _checkpoint_sampler(net, meta, nfe):
    method = meta.get("method", "af")
    if method == "fm":
        model = FlowMatchingModel(net, int(meta.get("n_classes", 0)))
        return _fm_sampler(model, nfe)
    regime = meta.get("regime", "single")
    pairs = _convert("pairs", meta.get("pairs", ""), "pairs")
    sched = af_schedule(regime, pairs, nfe)
    return _af_sampler(net, sched, meta.get("g_kind", "residual"), pairs if regime == "discrete" else None)


def eval_checkpoint(path, cfg: RunConfig, nfe=None, use_ema=True, out=None):
    """Metrics of a saved generator against the config's data and prior.

    ``nfe`` defaults to 1 for adversarial models and ``cfg.eval_nfe`` for
    flow matching. The report is also written to ``out`` (default: next to
    the checkpoint) as ``metric,value`` CSV.
    """
    net, _, meta = _load_generator(path, use_ema)
    data = resolve_dist(cfg.data, cfg.class_weights)
    prior = resolve_dist(cfg.prior, dim=data.dim)
    if nfe is None:
        nfe = cfg.eval_nfe if meta.get("method") == "fm" else _default_nfe(meta)
    gen = _checkpoint_sampler(net, meta, nfe)
    report = score(gen, data, prior, np.random.default_rng(cfg.eval_seed), cfg.eval_count)
    report["nfe"] = nfe
    path = Path(path)
    out = Path(out) if out else path.with_name(f"eval-{path.stem}-{'ema' if use_ema else 'online'}.csv")
    write_csv(out, ("metric", "value"), [])
    with open(out, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for k, v in report.items():
            w.writerow([k, _fmt_csv(v)])
    return report


def _default_nfe(meta):
    if meta.get("regime") == "discrete":
        pairs = _convert("pairs", meta.get("pairs", ""), "pairs")
        return len(chain_schedule(pairs)) - 1
    return 1


def sample_checkpoint(path, count, seed=0, nfe=None, cls=None, use_ema=True):
    net, _, meta = _load_generator(path, use_ema)
    if "prior" not in meta or "data" not in meta:
        raise ConfigError("checkpoint lacks data/prior metadata; use eval with a config instead")
    data = resolve_dist(meta["data"], _convert("class_weights", meta.get("class_weights", ""), "floats"))
    prior = resolve_dist(meta["prior"], dim=data.dim)
    if nfe is None:
        nfe = 64 if meta.get("method") == "fm" else _default_nfe(meta)
    rng = np.random.default_rng(seed)
    c = None
    if isinstance(data, ConditionalDataset):
        if cls is None:
            c = rng.choice(data.n_classes, size=count, p=data.class_weights)
        elif not 0 <= cls < data.n_classes:
            raise ConfigError(f"class id {cls} out of range")
        else:
            c = np.full(count, cls)
    elif cls is not None:
        raise ConfigError("unconditional model takes no class id")
    return _checkpoint_sampler(net, meta, nfe)(flows.sample(prior, count, rng), c)


# -- presets and sweeps ----------------------------------------------------------------

def preset_configs(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    base = resources.files("advflow") / "presets" / name
    return sorted(str(p) for p in base.iterdir() if p.name.endswith(".cfg"))


def _sweep_one(args):
    path, root, force, seed = args
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(path)
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        status = run_experiment(cfg, root=root, force=force)
    except ConfigError as exc:
        log.error("%s: %s", path, exc)
        return path, EXIT_CONFIG
    except RunExists as exc:
        log.error("%s", exc)
        return path, EXIT_EXISTS
    except OSError as exc:
        log.error("%s: %s", path, exc)
        return path, EXIT_IO
    return path, status


def sweep(pattern, root=None, force=False, seed=None, jobs=1):
    """Run every config matching ``pattern`` (or preset name); returns the worst status."""
    paths = preset_configs(pattern) if pattern in PRESETS else sorted(glob.glob(pattern))
    if not paths:
        raise ConfigError(f"no configs match {pattern!r}")
    tasks = [(p, root, force, seed) for p in paths]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    for path, status in results:
        log.info("%s -> status %d", path, status)
    return max(status for _, status in results)


# -- entry point ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="advflow", description="Adversarial flow models on toy distributions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run config")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--output", help=f"output root (default ${OUTPUT_ENV} or ./runs)")
    t.add_argument("--force", action="store_true", help="overwrite an existing run directory")

    e = sub.add_parser("eval", help="score a checkpoint against a config's benchmark")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--nfe", type=int)
    e.add_argument("--online", action="store_true", help="use online instead of EMA weights")
    e.add_argument("--out")

    s = sub.add_parser("sample", help="draw samples from a checkpoint as CSV")
    s.add_argument("checkpoint")
    s.add_argument("--nfe", type=int)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--class", dest="cls", type=int)
    s.add_argument("--online", action="store_true")
    s.add_argument("--out")

    w = sub.add_parser("sweep", help="run all configs matching a glob or a preset name")
    w.add_argument("pattern", help=f"config glob or one of {', '.join(PRESETS)}")
    w.add_argument("--seed", type=int)
    w.add_argument("--output")
    w.add_argument("--force", action="store_true")
    w.add_argument("--jobs", type=int, default=1)

    pl = sub.add_parser("plot", help="regenerate the SVG for a CSV artifact")
    pl.add_argument("csv", nargs="+")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            status = run_experiment(cfg, root=args.output, force=args.force)
            print(run_dir(cfg, args.output))
            return status
        if args.command == "eval":
            report = eval_checkpoint(args.checkpoint, load_config(args.config), nfe=args.nfe,
                                     use_ema=not args.online, out=args.out)
            for k, v in report.items():
                print(f"{k}: {_fmt_csv(v)}")
            return EXIT_OK
        if args.command == "sample":
            x = sample_checkpoint(args.checkpoint, args.count, args.seed, args.nfe, args.cls,
                                  use_ema=not args.online)
            out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
            try:
                for row in x:
                    out.write(",".join(_fmt_csv(v) for v in row) + "\n")
            finally:
                if args.out:
                    out.close()
            return EXIT_OK
        if args.command == "sweep":
            return sweep(args.pattern, root=args.output, force=args.force, seed=args.seed, jobs=args.jobs)
        if args.command == "plot":
            for path in args.csv:
                print(plot_csv(path))
            return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
