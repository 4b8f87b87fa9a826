import math
from dataclasses import replace

import numpy as np
import pytest

from advflow import flows
from advflow import objectives as obj
from advflow.guidance import GuidanceConfig, train_classifier
from advflow.netcore import AdamW, Network
from advflow.trainer import (ConfigError, FMConfig, TrainConfig, Trainer, TrainingStalled,
                             apply_generator, chain_schedule, evaluate_1d, make_evaluator,
                             make_jitter_augment, ot_schedule, sample_generator,
                             sample_timesteps, train_baseline_fm, train_baseline_gan)

SMALL = dict(hidden_g=(8, 8), hidden_d=(8, 8), batch_size=32, steps=20)


@pytest.fixture
def three():
    return flows.three_mode_1d(), flows.standard_normal()


def _params(net):
    return [p.copy() for p in net.params]


def _same(a, b):
    return all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_config_validation():
    bad = [dict(regime="other"), dict(ot_shape="linear"), dict(ot_initial=0.1, ot_final=0.2),
           dict(lambda_gp=-1), dict(gp_eps=0), dict(gp_ratio=1.5), dict(regime="discrete"),
           dict(regime="discrete", pairs=((0.5, 0.7),)), dict(g_kind="other"),
           dict(repeat=2, regime="any"), dict(augment="flip"), dict(augment_std=-1.0)]
    for kw in bad:
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
    cfg = TrainConfig()
    assert cfg.lambda_cp == 0.01 and cfg.gp_eps == 0.01 and cfg.beta1 == 0.0 and cfg.beta2 == 0.9


@pytest.mark.parametrize("kw", [dict(ot_initial=0.2, ot_final=0.01, ot_duration=100),
                                dict(ot_initial=0.3, ot_shape="constant")])
def test_ot_schedule_monotone(kw):
    cfg = TrainConfig(**kw)
    vals = [ot_schedule(cfg, s) for s in range(0, 300, 5)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert vals[0] == cfg.ot_initial
    assert vals[-1] == pytest.approx(cfg.ot_final if cfg.ot_shape == "cosine" else cfg.ot_initial)
    with pytest.raises(ValueError):
        ot_schedule(cfg, -1)


def test_timestep_regimes(rng):
    s, t = sample_timesteps(TrainConfig(), 4, rng)
    assert np.all(s == 1) and np.all(t == 0)
    cfg = TrainConfig(regime="discrete", pairs=((1.0, 0.5), (0.5, 0.0)))
    s, t = sample_timesteps(cfg, 200, rng)
    assert set(zip(s, t)) == {(1.0, 0.5), (0.5, 0.0)}
    s, t = sample_timesteps(TrainConfig(regime="any"), 500, rng)
    assert np.all(t <= s) and np.all((0 <= t) & (s <= 1))


def test_generator_starts_at_identity(three, rng):
    tr = Trainer(TrainConfig(**SMALL), *three)
    z = rng.normal(size=(5, 1))
    np.testing.assert_array_equal(sample_generator(tr.state.G, z), z)


def test_parameter_isolation(three):
    tr = Trainer(TrainConfig(**SMALL), *three)
    g0, d0 = _params(tr.state.G), _params(tr.state.D)
    tr.train_step(tr.draw_batch(tr.rng_d), "dis")
    assert _same(g0, tr.state.G.params) and not _same(d0, tr.state.D.params)
    d1 = _params(tr.state.D)
    tr.train_step(tr.draw_batch(tr.rng_g), "gen")
    assert _same(d1, tr.state.D.params) and not _same(g0, tr.state.G.params)
    with pytest.raises(ValueError):
        tr.train_step(tr.draw_batch(tr.rng_g), "both")


@pytest.mark.parametrize("regime", [dict(), dict(regime="discrete", pairs=((1.0, 0.5), (0.5, 0.0))),
                                    dict(regime="any"), dict(repeat=2)])
def test_seeded_runs_are_bitwise_identical(three, regime):
    runs = []
    for _ in range(2):
        tr = Trainer(TrainConfig(seed=5, **SMALL, **regime), *three)
        logs = [tr.iteration() for _ in range(10)]
        runs.append((logs, _params(tr.state.G), _params(tr.state.D), tr.state.ema.shadow))
    assert runs[0][0] == runs[1][0]
    for a, b in zip(runs[0][1:], runs[1][1:]):
        assert _same(a, b)


def test_ot_gradient_bypasses_normalization(three):
    """With a flat discriminator the generator update is plain OT regression."""
    cfg = TrainConfig(**SMALL, ot_initial=0.7, ot_shape="constant", regime="discrete",
                      pairs=((1.0, 0.4), (0.4, 0.0)))
    tr = Trainer(cfg, *three)
    for p in tr.state.D.params[-2:]:
        p[...] = 0.0
    for p in tr.state.G.params:
        p += 0.1
    G_ref = Network(1, 1, hidden=cfg.hidden_g, n_times=2, rng=np.random.default_rng(0))
    G_ref.load_params(tr.state.G.params)
    opt = AdamW(G_ref.params, lr=cfg.lr_g, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    batch = tr.draw_batch(tr.rng_g)
    tr.train_step(batch, "gen")

    x_s = flows.interp(batch.x, batch.z_src, batch.s)
    pred = apply_generator(G_ref, x_s, batch.s, batch.t)
    _, d = obj.ot_loss_and_grad(pred, x_s, batch.s, batch.t, cfg.delta)
    grads, _ = G_ref.backward(obj.generator_parameterize_grad(0.7 * d, batch.s, batch.t))
    opt.step(grads)
    for a, b in zip(tr.state.G.params, G_ref.params):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_sample_generator_validation(three, rng):
    tr = Trainer(TrainConfig(**SMALL), *three)
    z = rng.normal(size=(3, 1))
    for sched in [(1.0, 0.5, 0.0), (0.9, 0.0), (1.0, 1.0, 0.0), (1.0,)]:
        with pytest.raises(ConfigError):
            sample_generator(tr.state.G, z, sched)
    cfg = TrainConfig(**SMALL, regime="discrete", pairs=((1.0, 0.5), (0.5, 0.0)))
    tr = Trainer(cfg, *three)
    assert tr.schedule() == (1.0, 0.5, 0.0)
    with pytest.raises(ConfigError):
        sample_generator(tr.state.G, z, (1.0, 0.25, 0.0), trained_pairs=cfg.pairs)
    assert sample_generator(tr.state.G, z, (1.0, 0.5, 0.0), trained_pairs=cfg.pairs).shape == (3, 1)


def test_chain_schedule():
    assert chain_schedule(((0.5, 0.0), (1.0, 0.5))) == (1.0, 0.5, 0.0)
    with pytest.raises(ConfigError):
        chain_schedule(((1.0, 0.5),))


def test_d_reload_restores_snapshot(three):
    tr = Trainer(TrainConfig(**SMALL), *three)
    tr.snapshot_d()
    saved = _params(tr.state.D)
    for _ in range(3):
        tr.iteration()
    assert not _same(saved, tr.state.D.params)
    tr.d_reload(0)
    assert _same(saved, tr.state.D.params)
    with pytest.raises(IndexError):
        tr.d_reload(5)


def test_stall_policy(three):
    cfg = TrainConfig(**SMALL, d_reload=True, stall_gap=-1e9, stall_steps=3, snapshot_every=1)
    tr = Trainer(cfg, *three)
    recs = [tr.iteration() for _ in range(3)]
    assert recs[-1].get("d_reloaded") == 1
    tr = Trainer(replace(cfg, d_reload=False, stall_abort=True), *three)
    with pytest.raises(TrainingStalled):
        for _ in range(3):
            tr.iteration()


def test_ema_reload_on_plateau(three):
    tr = Trainer(TrainConfig(**SMALL, ema_reload=True, plateau_evals=2), *three)
    tr.iteration()
    lr = tr.state.opt_g.lr
    for w in (0.5, 0.6, 0.7):
        tr.note_eval(w)
    assert tr.reload_phase and tr.state.opt_g.lr == lr / 2
    assert _same(tr.state.G.params, tr.state.ema.shadow)


def test_jitter_shares_offset(rng):
    real, fake = np.zeros((4, 1)), np.ones((4, 1))
    r, f = make_jitter_augment(0.5)(real, fake, rng)
    np.testing.assert_allclose(f - r, 1.0)
    r, f = make_jitter_augment(0.5, 0.0, 10)(real, fake, rng, step=10)
    np.testing.assert_array_equal(r, real)


def test_guidance_requirements(three):
    data = flows.two_class_1d()
    with pytest.raises(ConfigError):
        Trainer(TrainConfig(**SMALL, guidance=GuidanceConfig("flow", 1.0)), data, three[1])
    with pytest.raises(ConfigError):
        Trainer(TrainConfig(**SMALL, guidance=GuidanceConfig("implicit", 1.0)), data, three[1])
    with pytest.raises(ConfigError):
        Trainer(TrainConfig(**SMALL), flows.three_mode_1d(), flows.standard_normal(2))


@pytest.mark.parametrize("mode", ["simple", "flow", "implicit"])
def test_conditional_guided_training_runs(mode):
    data, prior = flows.two_class_1d(), flows.standard_normal()
    clf = v = None
    if mode == "implicit":
        v = train_baseline_fm(data, prior, FMConfig(hidden=(8, 8), steps=5, cfg_dropout=0.2)).guide()
    else:
        clf = train_classifier(data, prior, steps=5, hidden=(8, 8))
    cfg = TrainConfig(**SMALL, guidance=GuidanceConfig(mode, 0.5))
    tr = Trainer(cfg, data, prior, classifier=clf, v_guide=v)
    state = tr.fit(eval_every=10, evaluator=make_evaluator(data, prior, count=200))
    assert len(state.log) == 2 and math.isfinite(state.log[-1]["w1"])


def test_evaluate_identity_on_matched_distributions(rng):
    prior = flows.standard_normal()
    tr = Trainer(TrainConfig(**SMALL), prior, prior)
    m = evaluate_1d(tr.state.G, prior, prior, rng, count=2000)
    assert m["transport_cost"] == 0.0 and m["monotonicity"] == 0.0 and m["map_error"] < 1e-8


def test_baselines_run(three):
    tr = train_baseline_gan(TrainConfig(**SMALL, ot_initial=0.5), *three, steps=3)
    assert tr.cfg.ot_initial == 0.0 and tr.state.step == 3
    losses = []
    fm = train_baseline_fm(*three, FMConfig(hidden=(16, 16), steps=300, batch_size=64),
                           callback=lambda step, loss, model: losses.append(loss))
    assert len(losses) == 300 and np.mean(losses[-50:]) < np.mean(losses[:50])
    assert fm.sample(np.zeros((4, 1)), nfe=4).shape == (4, 1)
    with pytest.raises(ConfigError):
        fm.guide()
