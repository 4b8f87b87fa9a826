import math

import numpy as np
import pytest

from advflow.netcore import (AdamW, EmaWeights, GradNorm, Network, NonFiniteError, check_finite,
                             iteration_times, load_checkpoint, save_checkpoint, time_features)
from conftest import numeric_grad, rel_err

CONFIGS = [
    dict(in_dim=2, out_dim=3, hidden=(5, 4, 6)),
    dict(in_dim=1, out_dim=1, hidden=(4, 4), act="tanh", n_times=1),
    dict(in_dim=2, out_dim=1, hidden=(4, 5, 3), n_classes=3, n_times=2),
    dict(in_dim=1, out_dim=2, hidden=(4, 4, 4), n_times=2, repeat=3),
    dict(in_dim=3, out_dim=1, hidden=(3, 3), act="tanh", input_gain=3.0),
]


def _inputs(net, rng, batch=4):
    x = rng.normal(size=(batch, net.in_dim))
    cond = rng.integers(0, net.n_classes, size=batch) if net.n_classes else None
    times = None
    if net.n_times and net.repeat == 1:
        times = rng.uniform(size=(batch, net.n_times))
    return x, cond, times


@pytest.mark.parametrize("kw", CONFIGS)
def test_param_and_input_gradients_match_finite_differences(kw, rng):
    net = Network(rng=rng, **kw)
    x, cond, times = _inputs(net, rng)
    w = rng.normal(size=(len(x), net.out_dim))

    def loss():
        return float(np.sum(w * net.forward(x, cond, times)))

    loss()
    grads, gx = net.backward(w)
    for p, g in zip(net.params, grads):
        assert rel_err(g, numeric_grad(loss, p)) < 1e-6
    assert rel_err(gx, numeric_grad(loss, x)) < 1e-6


def test_time_features_layout():
    f = time_features(np.array([[0.25]]), k=4)
    expect = [0.25, math.sin(math.pi * 0.25), math.sin(2 * math.pi * 0.25),
              math.cos(math.pi * 0.25), math.cos(2 * math.pi * 0.25)]
    np.testing.assert_allclose(f[0], expect, rtol=1e-15)
    assert time_features(np.zeros((3, 2)), k=8).shape == (3, 18)
    with pytest.raises(ValueError):
        time_features(np.zeros((1, 1)), k=3)


def test_iteration_times_cover_unit_interval():
    pts = iteration_times(4)
    assert pts[0][0] == 1.0 and pts[-1][1] == 0.0
    assert all(a[1] == b[0] for a, b in zip(pts, pts[1:]))


def test_repetition_shares_parameters(rng):
    base = Network(1, 1, hidden=(8, 8, 8), n_times=2, rng=rng)
    rep = Network(1, 1, hidden=(8, 8, 8), n_times=2, repeat=3, rng=rng)
    assert base.param_count() == rep.param_count()
    with pytest.raises(ValueError):
        rep.forward(np.zeros((2, 1)), times=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Network(1, 1, hidden=(8, 4, 8), n_times=2, repeat=2)
    with pytest.raises(ValueError):
        Network(1, 1, hidden=(8, 8), repeat=2)


def test_zero_final_and_conditioning_mode(rng):
    net = Network(2, 2, hidden=(4, 4), n_classes=2, n_times=1, zero_final=True, rng=rng)
    out = net.forward(rng.normal(size=(3, 2)), cond=[0, 1, 0], times=np.full((3, 1), 0.5))
    assert np.all(out == 0.0)
    assert net.conditioning_mode() == "both"
    assert Network(1, 1, hidden=(2, 2)).conditioning_mode() == "none"


def test_input_validation(rng):
    net = Network(2, 1, hidden=(4, 4), n_classes=2, n_times=1, rng=rng)
    x = np.zeros((2, 2))
    with pytest.raises(ValueError):
        net.forward(np.zeros((2, 3)), cond=[0, 0], times=np.zeros((2, 1)))
    with pytest.raises(ValueError):
        net.forward(x, cond=[0, 2], times=np.zeros((2, 1)))
    with pytest.raises(ValueError):
        net.forward(x, cond=[0, 1], times=np.full((2, 1), 1.5))
    with pytest.raises(ValueError):
        net.forward(x, cond=None, times=np.zeros((2, 1)))
    with pytest.raises(RuntimeError):
        Network(1, 1, hidden=(2, 2)).backward(np.zeros((1, 1)))


def test_non_finite_detection(rng):
    net = Network(1, 1, hidden=(2, 2), rng=rng)
    with pytest.raises(NonFiniteError):
        net.forward(np.array([[np.nan]]))
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.inf]), "x")


def test_adamw_first_step_closed_form():
    p = np.array([1.0, -2.0])
    opt = AdamW([p], lr=0.1, beta1=0.0, beta2=0.9, eps=0.0, weight_decay=0.01)
    opt.step([np.array([0.5, -4.0])])
    # bias-corrected first step moves each coordinate by lr * sign(g) after decay
    np.testing.assert_allclose(p, np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.array([1.0, -1.0]),
                               rtol=1e-14)


def test_adamw_matches_reference_loop(rng):
    p = rng.normal(size=3)
    q = p.copy()
    opt = AdamW([p], lr=1e-2, beta1=0.5, beta2=0.9, weight_decay=0.1)
    m = np.zeros(3)
    v = np.zeros(3)
    for t in range(1, 6):
        g = rng.normal(size=3)
        opt.step([g])
        q *= 1 - 1e-2 * 0.1
        m = 0.5 * m + 0.5 * g
        v = 0.9 * v + 0.1 * g * g
        q -= 1e-2 * (m / (1 - 0.5 ** t)) / (np.sqrt(v / (1 - 0.9 ** t)) + 1e-8)
    np.testing.assert_allclose(p, q, rtol=1e-13)


def test_adamw_state_round_trip_and_reset(rng):
    p = rng.normal(size=2)
    opt = AdamW([p], lr=1e-2)
    opt.step([np.ones(2)])
    saved = opt.state_copy()
    opt.step([np.ones(2)])
    opt.load_state(saved)
    assert opt.step_count == 1
    opt.reset()
    assert opt.step_count == 0 and np.all(opt.v[0] == 0)
    with pytest.raises(NonFiniteError):
        opt.step([np.array([np.nan, 0.0])])


def test_ema_update_rule():
    p = np.array([0.0])
    ema = EmaWeights([p], decay=0.9)
    p[...] = 1.0
    ema.update([p])
    ema.update([p])
    np.testing.assert_allclose(ema.shadow[0], [1 - 0.81], rtol=1e-14)
    with pytest.raises(ValueError):
        EmaWeights([p], decay=1.5)


def test_grad_norm_identity_forward_and_scale_invariance(rng):
    g = rng.normal(size=(16, 2))
    a, b = GradNorm(), GradNorm()
    x = rng.normal(size=(4, 2))
    assert a.forward(x) is x
    for _ in range(30):
        ya = a.backward(g)
        yb = b.backward(1000.0 * g)
    np.testing.assert_allclose(ya, yb, rtol=1e-9)


def test_grad_norm_fixed_point(rng):
    g = rng.normal(size=(32, 2))
    gn = GradNorm(ema_decay=0.9, target_scale=2.0)
    for _ in range(500):
        out = gn.backward(g)
    assert abs(np.linalg.norm(out) - 2.0 / math.sqrt(g.size)) < 1e-6


@pytest.mark.parametrize("with_ema", [True, False])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng, with_ema):
    net = Network(2, 1, hidden=(4, 4, 4), act="tanh", n_classes=2, n_times=2, repeat=1, rng=rng)
    ema = EmaWeights(net.params, 0.5)
    for p in net.params:
        p += rng.normal(size=p.shape)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, net, ema if with_ema else None, step=17, meta={"note": "x y"})
    loaded, shadow, step, meta = load_checkpoint(path)
    assert step == 17 and meta == {"note": "x y"}
    assert loaded.topology() == net.topology()
    for a, b in zip(loaded.params, net.params):
        assert a.tobytes() == b.tobytes()
    if with_ema:
        for a, b in zip(shadow, ema.shadow):
            assert a.tobytes() == b.tobytes()
    else:
        assert shadow is None
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".ckpt-")]


def test_checkpoint_rejects_foreign_files(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"hello\nend_header\n")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
