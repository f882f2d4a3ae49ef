import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poolid.data import AnchorWindow, WindowBatch, make_window_batch
from poolid.eval import criterion, pooled_horizon_rmse
from poolid.linid import StateSpaceModel, SubspaceOptions, estimate_subspace
from poolid.nlarx import (AdamState, MlpParams, NlarxConfig, NlarxModel, TrainingDivergedError, fit,
                          grad_bptt, loss, loss_and_grad, predict_one_step, rollout, rollout_batch)

from conftest import lti_system, make_frame, prbs

NU, NY = 3, 2


def cfg(**kw):
    base = dict(n_a=2, n_b=2, hidden_layers=(8,), horizon=4, n_u=NU, n_y=NY)
    base.update(kw)
    return NlarxConfig(**base)


def random_params(c, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    p = MlpParams.init(c, rng)
    p.theta[:] += scale * 0.3 * rng.standard_normal(p.theta.size)
    return p


def random_batch(c, K=5, P=None, seed=1, past=None):
    rng = np.random.default_rng(seed)
    P = c.horizon if P is None else P
    L = past or c.past_len
    return WindowBatch(np.arange(K), rng.normal(size=(K, L, NU + NY)), rng.normal(size=(K, P, NU)),
                       rng.normal(size=(K, P, NY)), tuple(range(NU)), tuple(range(NU, NU + NY)))


def with_targets(b, fy):
    return WindowBatch(b.anchors, b.past, b.future_inputs, fy, b.input_idx, b.output_idx)


def windows(batch):
    return [AnchorWindow(int(a), np.concatenate([pu, py], axis=1), fu, fy)
            for a, pu, py, fu, fy in zip(batch.anchors, batch.past_inputs, batch.past_outputs,
                                         batch.future_inputs, batch.future_outputs)]


def hand_forward(layers, x):
    """Second forward-pass implementation: explicit loops over units."""
    h = list(x)
    for li, (W, b) in enumerate(layers):
        z = [sum(W[o, i] * h[i] for i in range(len(h))) + b[o] for o in range(W.shape[0])]
        h = z if li == len(layers) - 1 else [np.tanh(v) for v in z]
    return np.array(h)


# ---------------------------------------------------------------- forward / rollout

def test_config_widths():
    c = cfg(n_a=4, n_b=1, hidden_layers=(16, 8))
    assert c.input_width == 5 * NY + 2 * NU
    assert c.layer_sizes == [16, 16, 8, NY]
    assert c.past_len == 5
    assert MlpParams.init(c, np.random.default_rng(0)).theta.size == c.n_params()
    assert NlarxConfig.from_dict(c.to_dict()) == c


def test_zero_network_outputs_zero():
    c = cfg()
    p = MlpParams(c.layer_sizes)
    assert np.array_equal(predict_one_step(p, c, np.ones((3, NY)), np.ones((3, NU))), np.zeros(NY))
    b = random_batch(c, P=6)
    assert np.array_equal(rollout_batch(p, c, b.past_inputs, b.past_outputs, b.future_inputs), np.zeros((5, 6, NY)))


def test_affine_network():
    c = cfg(hidden_layers=())
    rng = np.random.default_rng(3)
    W, bias = rng.normal(size=(NY, c.input_width)), rng.normal(size=NY)
    p = MlpParams.from_layers([(W, bias)])
    ly, lu = rng.normal(size=(3, NY)), rng.normal(size=(3, NU))
    x = np.concatenate([ly.ravel(), lu.ravel()])
    assert np.allclose(predict_one_step(p, c, ly, lu), W @ x + bias, atol=1e-14)


@pytest.mark.parametrize("hidden", [(8,), (16, 8), (8, 8, 8)])
def test_forward_matches_hand_rolled(hidden):
    c = cfg(hidden_layers=hidden)
    p = random_params(c, 4)
    rng = np.random.default_rng(5)
    ly, lu = rng.normal(size=(3, NY)), rng.normal(size=(3, NU))
    expected = hand_forward(p.layers, np.concatenate([ly.ravel(), lu.ravel()]))
    assert np.allclose(predict_one_step(p, c, ly, lu), expected, atol=1e-12)


def test_shape_mismatch():
    c = cfg()
    p = MlpParams(c.layer_sizes)
    with pytest.raises(ValueError):
        predict_one_step(p, c, np.ones((2, NY)), np.ones((3, NU)))
    with pytest.raises(ValueError):
        predict_one_step(MlpParams([4, 2]), c, np.ones((3, NY)), np.ones((3, NU)))
    b = random_batch(c, past=2)
    with pytest.raises(ValueError, match="needs 3"):
        rollout_batch(p, c, b.past_inputs, b.past_outputs, b.future_inputs)


def test_rollout_p1_is_one_step():
    c = cfg(horizon=1)
    p = random_params(c, 6)
    w = windows(random_batch(c, K=1, P=1))[0]
    past = w.past
    ly, lu = past[::-1, NU:][:3], past[::-1, :NU][:3]
    assert np.allclose(rollout(p, c, w)[0], predict_one_step(p, c, ly, lu), atol=1e-14)


def test_rollout_feeds_predictions_back():
    c = cfg()
    p = random_params(c, 7)
    w = windows(random_batch(c, K=1, P=3))[0]
    out = rollout(p, c, w)
    ybuf = list(w.past[::-1, NU:][:3])
    ubuf = list(w.past[::-1, :NU][:3])
    for k in range(3):
        y = predict_one_step(p, c, np.array(ybuf), np.array(ubuf))
        assert np.allclose(out[k], y, atol=1e-13)
        ybuf = [y] + ybuf[:-1]
        ubuf = [w.future_inputs[k]] + ubuf[:-1]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_rollout_prefix_property(P, seed):
    c = cfg()
    p = random_params(c, seed % 1000)
    b = random_batch(c, K=3, P=12, seed=seed)
    full = rollout_batch(p, c, b.past_inputs, b.past_outputs, b.future_inputs)
    short = rollout_batch(p, c, b.past_inputs, b.past_outputs, b.future_inputs[:, :P])
    assert np.array_equal(full[:, :P], short)


def test_linear_network_reproduces_state_space_forecast():
    rng = np.random.default_rng(11)
    A, B, C = lti_system(rng, n=3, nu=NU, ny=NY, radius=(0.3, 0.8))
    lss = StateSpaceModel(A, B, C)
    # exact ARX form of the LTI system, fitted by least squares on noise-free data
    u = prbs(rng, 600, NU, hold=1) + 0.1 * rng.standard_normal((600, NU))
    y = lss.simulate(u, rng.normal(size=3))
    n_lag = 3
    rows = [np.concatenate([y[k - n_lag + 1:k + 1][::-1].ravel(), u[k - n_lag + 1:k + 1][::-1].ravel()])
            for k in range(n_lag - 1, 599)]
    theta, *_ = np.linalg.lstsq(np.array(rows), y[n_lag:], rcond=None)
    c = NlarxConfig(n_a=n_lag - 1, n_b=n_lag - 1, hidden_layers=(), n_u=NU, n_y=NY)
    p = MlpParams.from_layers([(theta.T, np.zeros(NY))])
    u2 = rng.normal(size=(68, NU))
    y2 = lss.simulate(u2, rng.normal(size=3))
    fc = lss.forecast(np.hstack([u2[:20], y2[:20]]), u2[20:])
    ro = rollout_batch(p, c, u2[None, :20], y2[None, :20], u2[None, 20:])[0]
    assert np.max(np.abs(ro - fc)) < 1e-10


# ---------------------------------------------------------------- loss

def test_loss_closed_forms():
    c = cfg(hidden_layers=())
    b = random_batch(c, P=4)
    zero = MlpParams(c.layer_sizes)
    # perfect rollout: targets are the model's own predictions
    p = random_params(c, 8)
    yhat = rollout_batch(p, c, b.past_inputs, b.past_outputs, b.future_inputs)
    perfect = with_targets(b, yhat)
    assert loss(p, c, perfect) == 0.0
    # constant offset on every channel and step (zero network predicts 0)
    offset = with_targets(b, np.full((5, 4, NY), 0.3))
    assert loss(zero, c, offset) == pytest.approx(0.09, rel=1e-14)
    # bias-only parameters carry no penalty
    c3 = cfg(hidden_layers=(), l2=1e-3)
    biased = MlpParams(c3.layer_sizes)
    biased.layers[0][1][:] = 0.3
    assert loss(biased, c3, offset) == 0.0
    assert loss(zero, c3, b) == loss(zero, c, b) == pytest.approx(np.mean(b.future_outputs ** 2))
    with pytest.raises(ValueError):
        loss(zero, c, b.take(slice(0, 0)))


def test_loss_accepts_window_lists():
    c = cfg()
    p = random_params(c, 9)
    b = random_batch(c)
    assert loss(p, c, windows(b)) == pytest.approx(loss(p, c, b), rel=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_loss_decomposes_over_windows(K, seed):
    c = cfg()
    p = random_params(c, seed % 97)
    b = random_batch(c, K=K, seed=seed)
    singles = [loss(p, c, b.take(slice(k, k + 1))) for k in range(K)]
    assert loss(p, c, b) == pytest.approx(np.mean(singles), rel=1e-12)


# ---------------------------------------------------------------- gradients

def _fd_check(c, seed, n_coords=200, h=1e-5):
    p = random_params(c, seed)
    b = random_batch(c, K=4, seed=seed + 1)
    g = grad_bptt(p, c, b)
    rng = np.random.default_rng(seed)
    idx = rng.choice(p.theta.size, size=min(n_coords, p.theta.size), replace=False)
    fd = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = p.theta[i]
        p.theta[i] = old + h
        lp = loss(p, c, b)
        p.theta[i] = old - h
        lm = loss(p, c, b)
        p.theta[i] = old
        fd[j] = (lp - lm) / (2 * h)
    return np.linalg.norm(fd - g[idx]) / np.linalg.norm(g[idx])


@pytest.mark.parametrize("hidden", [(8,), (16,), (32,), (64,), (16, 8), (64, 32), (8, 16, 32), (64, 64, 64)])
def test_gradient_matches_finite_differences(hidden):
    c = cfg(hidden_layers=hidden, horizon=5, l2=1e-3)
    assert _fd_check(c, seed=len(hidden) * 100 + hidden[0]) <= 1e-5


@pytest.mark.parametrize("kw", [dict(n_a=0, n_b=0), dict(n_a=5, n_b=1, horizon=15), dict(hidden_layers=())])
def test_gradient_lag_variants(kw):
    assert _fd_check(cfg(**kw), seed=3) <= 1e-5


def _one_step_backprop(params, x, target):
    """Standard backprop of mean((f(x) - target)^2) for one regression step."""
    hs, zs = [x], []
    for li, (W, b) in enumerate(params.layers):
        z = hs[-1] @ W.T + b
        zs.append(z)
        hs.append(z if li == len(params.layers) - 1 else np.tanh(z))
    delta = 2.0 * (hs[-1] - target) / target.size
    grads = []
    for li in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[li]
        if li < len(params.layers) - 1:
            delta = delta * (1 - np.tanh(zs[li]) ** 2)
        grads.append((delta.T @ hs[li], delta.sum(axis=0)))
        delta = delta @ W
    grads.reverse()
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


def test_p1_gradient_equals_one_step_backprop():
    c = cfg(hidden_layers=(16, 8), horizon=1)
    p = random_params(c, 12)
    b = random_batch(c, K=6, P=1)
    x = np.concatenate([b.past_outputs[:, ::-1][:, :3].reshape(6, -1), b.past_inputs[:, ::-1][:, :3].reshape(6, -1)], axis=1)
    assert np.allclose(grad_bptt(p, c, b), _one_step_backprop(p, x, b.future_outputs[:, 0]), atol=1e-13)


def test_zero_gradient_at_exact_fit():
    c = cfg(hidden_layers=(16,), horizon=6)
    p = random_params(c, 13)
    b = random_batch(c, K=4, P=6)
    yhat = rollout_batch(p, c, b.past_inputs, b.past_outputs, b.future_inputs)
    exact = with_targets(b, yhat)
    value, g = loss_and_grad(p, c, exact)
    assert value == 0.0 and np.max(np.abs(g)) <= 1e-10


# ---------------------------------------------------------------- training

def test_adam_starts_from_zero_moments():
    s = AdamState.zeros(4)
    assert not s.m.any() and not s.v.any() and s.t == 0
    assert (s.beta1, s.beta2, s.eps) == (0.9, 0.999, 1e-8)
    theta = np.zeros(4)
    s.step(theta, np.array([1.0, -2.0, 0.0, 3.0]), 0.1)
    # the first bias-corrected step moves every coordinate by ~lr * sign(g)
    assert np.allclose(theta, [-0.1, 0.1, 0.0, -0.1], atol=1e-7)


def _toy_frames(n=200, seed=0):
    rng = np.random.default_rng(seed)
    A, B, C = lti_system(rng, n=2, nu=NU, ny=NY, radius=(0.5, 0.9))
    u = prbs(rng, n, NU, hold=4)
    y = StateSpaceModel(A, B, C).simulate(u)
    y = y / y.std(axis=0)
    return make_frame(np.hstack([u, y]), n_out=NY)


def test_training_converges_on_toy_set():
    f = _toy_frames(200)
    c = cfg(hidden_layers=(16,), horizon=3, learning_rate=1e-2, batch_size=16, epochs=60, patience=60,
            eval_horizon=8)
    b = make_window_batch(f, c.past_len, 3)
    start = loss(MlpParams.init(c, np.random.default_rng(c.seed)), c, b)
    res = fit(c, [f], [f])
    assert min(e["train_loss"] for e in res.log) < start / 10


def test_training_is_deterministic():
    f, v = _toy_frames(200, 1), _toy_frames(150, 2)
    c = cfg(hidden_layers=(8,), epochs=5, eval_horizon=8)
    r1, r2 = fit(c, [f], [v]), fit(c, [f], [v])
    assert r1.log == r2.log and np.array_equal(r1.params.theta, r2.params.theta)
    assert r1.best_score == min(e["val_full"] for e in r1.log)


def test_early_stopping_and_divergence():
    f = _toy_frames(200, 3)
    c = cfg(hidden_layers=(8,), epochs=50, patience=2, learning_rate=1e-2, eval_horizon=8)
    res = fit(c, [f], [_toy_frames(100, 4)])
    assert res.stopped_early and len(res.log) == res.best_epoch + 1 + 2
    bad = cfg(hidden_layers=(8,), epochs=3, learning_rate=1e9, eval_horizon=8)
    huge = make_frame(np.hstack([np.full((200, NU), 1e200), np.full((200, NY), 1e200)]), n_out=NY)
    with pytest.raises(TrainingDivergedError):
        fit(bad, [huge], [huge])


def test_model_round_trip(tmp_path):
    c = cfg(hidden_layers=(8, 4))
    m = NlarxModel(c, random_params(c, 14), info={"best_epoch": 3})
    m.save(tmp_path / "n.json")
    back = NlarxModel.load(tmp_path / "n.json")
    assert back.config == c and np.array_equal(back.params.theta, m.params.theta)
    b = random_batch(c, P=7)
    assert np.array_equal(back.forecast_batch(b.past_inputs, b.past_outputs, b.future_inputs),
                          m.forecast_batch(b.past_inputs, b.past_outputs, b.future_inputs))
    with pytest.raises(ValueError):
        NlarxModel.from_dict({"format": "poolid.lss/1"})


@pytest.mark.slow
def test_linear_plant_matches_state_space_pipeline():
    rng = np.random.default_rng(0)
    lti = StateSpaceModel(*lti_system(rng, n=2, nu=NU, ny=NY, radius=(0.6, 0.9)))

    def section(seed, n):
        r = np.random.default_rng(seed)
        u = prbs(r, n, NU, hold=5)
        y = lti.simulate(u)
        return u, y

    scale = section(1, 6000)[1].std(axis=0)

    def frame(seed, n):
        u, y = section(seed, n)
        y = y / scale + 0.05 * np.random.default_rng(seed + 100).standard_normal(y.shape)
        return make_frame(np.hstack([u, y]), n_out=NY)

    train, val = [frame(1, 3000)], [frame(2, 1500)]
    lss = estimate_subspace([(f.values[:, :NU], f.values[:, NU:]) for f in train],
                            SubspaceOptions(n_x=2, block_horizon=24))
    c = NlarxConfig(n_a=3, n_b=3, hidden_layers=(16,), horizon=15, learning_rate=3e-3, batch_size=32,
                    n_u=NU, n_y=NY, train_stride=2, val_stride=4)
    nl = NlarxModel(c, fit(c, train, val).params)
    score = {name: criterion(pooled_horizon_rmse(m, val, 48, 20, 4), 1, 48) for name, m in (("lss", lss), ("nl", nl))}
    assert score["nl"] <= 1.1 * score["lss"]
