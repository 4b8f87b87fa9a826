import numpy as np
import pytest

from advflow import flows
from advflow.guidance import (Classifier, ConditionalVelocity, GuidanceConfig, cg_loss,
                              cg_loss_and_grad, cross_entropy, implicit_cfg_loss,
                              implicit_cfg_loss_and_grad, multistep_cg_loss,
                              multistep_cg_loss_and_grad, train_classifier)
from advflow.netcore import Network
from conftest import numeric_grad, rel_err


@pytest.fixture
def clf(rng):
    return Classifier(Network(1, 3, hidden=(6, 6), act="tanh", n_times=1, rng=rng))


def test_guidance_config_validation(rng):
    with pytest.raises(ValueError):
        GuidanceConfig(mode="other")
    with pytest.raises(ValueError):
        GuidanceConfig(t_lo=0.6, t_hi=0.5)
    with pytest.raises(ValueError):
        GuidanceConfig(lambda_cg=-1)
    np.testing.assert_array_equal(GuidanceConfig(t_lo=0.3, t_hi=0.3).sample_t(4, rng), np.full(4, 0.3))
    t = GuidanceConfig(t_lo=0.2, t_hi=0.4).sample_t(1000, rng)
    assert t.min() >= 0.2 and t.max() <= 0.4


def test_classifier_needs_one_timestep(rng):
    with pytest.raises(ValueError):
        Classifier(Network(1, 2, hidden=(4, 4), rng=rng))


def test_log_probs_normalized(clf, rng):
    lp = clf.log_probs(rng.normal(size=(5, 1)), 0.3)
    np.testing.assert_allclose(np.exp(lp).sum(1), 1.0, rtol=1e-12)


@pytest.mark.parametrize("mode", ["simple", "flow"])
def test_cg_gradient(clf, rng, mode):
    gx = rng.normal(size=(5, 1))
    c = rng.integers(0, 3, size=5)
    zp = rng.normal(size=(5, 1))
    tp = rng.uniform(0, 0.9, size=5)
    _, g = cg_loss_and_grad(clf, gx, c, zp, tp, mode)
    assert rel_err(g, numeric_grad(lambda: cg_loss(clf, gx, c, zp, tp, mode), gx)) < 1e-6


def test_flow_cg_at_zero_range_equals_simple_bitwise(clf, rng):
    gx = rng.normal(size=(7, 1))
    c = rng.integers(0, 3, size=7)
    tp = GuidanceConfig(mode="flow", t_lo=0.0, t_hi=0.0).sample_t(7, rng)
    flow = cg_loss_and_grad(clf, gx, c, rng.normal(size=(7, 1)), tp, "flow")
    simple = cg_loss_and_grad(clf, gx, c, mode="simple")
    assert flow[0] == simple[0]
    assert flow[1].tobytes() == simple[1].tobytes()


def test_cg_errors(clf, rng):
    with pytest.raises(ValueError):
        cg_loss(clf, np.zeros((2, 1)), [0, 1], mode="flow")
    with pytest.raises(ValueError):
        cg_loss(clf, np.zeros((2, 1)), [0, 3], mode="simple")
    with pytest.raises(ValueError):
        cg_loss(clf, np.zeros((2, 1)), [0, 1], mode="bogus")


def test_implicit_cfg_gradient_and_value(rng):
    v = ConditionalVelocity(Network(1, 1, hidden=(5, 5), n_classes=3, n_times=1, rng=rng), 2)
    gx, zp = rng.normal(size=(6, 1)), rng.normal(size=(6, 1))
    c = rng.integers(0, 2, size=6)
    tp = rng.uniform(size=6)
    val, g = implicit_cfg_loss_and_grad(v, gx, c, zp, tp)
    xt = (1 - tp[:, None]) * gx + tp[:, None] * zp
    g_cls = v(xt, tp) - v(xt, tp, c)
    assert val == pytest.approx(-np.mean(np.sum(gx * g_cls, 1)))
    # the guidance direction is a stop-gradient target, so the analytic
    # gradient is the derivative with g_cls frozen
    frozen = g_cls.copy()
    num = numeric_grad(lambda: float(-np.mean(np.sum(gx * frozen, 1))), gx)
    assert rel_err(g, num) < 1e-8
    with pytest.raises(ValueError):
        implicit_cfg_loss(lambda *a: 0, gx, c, zp, tp)
    with pytest.raises(ValueError):
        ConditionalVelocity(Network(1, 1, hidden=(2, 2), n_classes=2, n_times=1, rng=rng), 2)


def test_multistep_cg_selects_rows(clf, rng):
    g = rng.normal(size=(6, 1))
    t = np.array([0.0, 0.5, 0.0, 0.5, 0.25, 0.0])
    c = rng.integers(0, 3, size=6)
    val, grad = multistep_cg_loss_and_grad(clf, g, t, c, t_set=(0.0,))
    sel = t == 0.0
    assert np.all(grad[~sel] == 0)
    assert val == pytest.approx(-np.mean(clf.log_probs(g[sel], 0.0)[np.arange(3), c[sel]]))
    assert rel_err(grad, numeric_grad(lambda: multistep_cg_loss(clf, g, t, c, (0.0,)), g)) < 1e-6
    assert multistep_cg_loss_and_grad(clf, g, t, c, t_set=(0.9,))[0] == 0.0
    full, _ = multistep_cg_loss_and_grad(clf, g, t, c)
    assert np.isfinite(full)


def test_train_classifier_separates_two_class_benchmark(rng):
    data = flows.two_class_1d()
    clf = train_classifier(data, flows.standard_normal(), steps=400, seed=0)
    x, c = data.sample(4000, rng)
    # Bayes accuracy for N(-1, .5^2) vs N(1, .5^2) is Phi(2) ~ 0.977
    assert clf.accuracy(x, c) > 0.95
    assert cross_entropy(clf, x, c) < 0.2
    with pytest.raises(ValueError):
        train_classifier(flows.ConditionalDataset((flows.three_mode_1d(),), np.array([1.0])),
                         flows.standard_normal(), steps=1)
