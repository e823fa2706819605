from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2sdown.grid import DimensionError
from s2sdown.preprocess import fit_normalization
from s2sdown.regressors import (MAX_STAGES, FittedRegressor, MlrModel, SearchSpace, SingularSystemError,
                                SmaAtUNet, TrainingError, TrainSpec, build_model, cnn_forward, fit_fixed_epochs,
                                hyper_search, load_state, mlr_fit_closed_form, ridge_lambda, stage_channels,
                                state_dict, train)
from s2sdown.regressors import layers as L
from s2sdown.regressors.smaat import reflect_padding


# -- layers ------------------------------------------------------------------

def _fd_check(layer, x, rng, h=1e-6, n=12, tol=1e-6):
    """Central differences of sum(w * layer(x)) for inputs and parameters against backward."""
    y = layer.forward(x, train=True)
    w = rng.normal(size=y.shape)
    buffers = {k: v.copy() for k, v in layer.named_buffers()}

    def f():
        out = layer.forward(x, train=True)
        for k, v in layer.named_buffers():
            np.copyto(v, buffers[k])
        return float(np.sum(w * out))

    f()
    layer.zero_grads()
    dx = layer.backward(w)
    for k, v in layer.named_buffers():
        np.copyto(v, buffers[k])
    targets = [("input", x, dx)] + [(k, p, g) for (k, p), (_, g) in
                                     zip(layer.named_parameters(), list(layer.named_grads()))]
    for name, arr, grad in targets:
        for i in rng.choice(arr.size, size=min(n, arr.size), replace=False):
            old = arr.flat[i]
            arr.flat[i] = old + h
            fp = f()
            arr.flat[i] = old - h
            fm = f()
            arr.flat[i] = old
            fd = (fp - fm) / (2 * h)
            assert abs(fd - grad.flat[i]) <= tol * max(1.0, abs(fd)), (name, i, fd, grad.flat[i])


@pytest.mark.parametrize("make", [
    lambda r: L.DepthwiseConv2d(3, 3, r),
    lambda r: L.Conv2d(3, 2, 7, r),
    lambda r: L.PointwiseConv2d(3, 4, bias=True, rng=r),
    lambda r: L.BatchNorm2d(3),
    lambda r: L.ReLU(),
    lambda r: L.MaxPool2d(),
    lambda r: L.BilinearUpsample2x(),
    lambda r: L.ChannelAttention(3, 2, r),
    lambda r: L.SpatialAttention(7, r),
    lambda r: L.double_conv(3, 4, rng=r),
], ids=["depthwise", "conv", "pointwise", "batchnorm", "relu", "maxpool", "upsample", "channel_att",
        "spatial_att", "double_conv"])
def test_layer_gradients(make):
    rng = np.random.default_rng(0)
    layer = make(rng)
    x = rng.normal(size=(2, 3, 6, 8))
    _fd_check(layer, x, rng)


def test_batchnorm_running_stats_and_inference():
    bn = L.BatchNorm2d(2, momentum=0.5)
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(8, 2, 4, 4))
    y = bn.forward(x, train=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    rm = dict(bn.named_buffers())
    assert np.all(rm["running_mean"] > 1.0)
    bn.forward(x, train=False)
    assert np.array_equal(dict(bn.named_buffers())["running_mean"], rm["running_mean"])


def test_decay_names_skip_biases_and_batchnorm():
    dc = L.double_conv(2, 3)
    names = dc.decay_names()
    assert "dsc1.dw.w" in names and "dsc1.pw.w" in names
    assert not any(n.startswith("bn") for n in names)
    head = L.PointwiseConv2d(3, 1, bias=True)
    assert head.decay_names() == {"w"}


# -- SmaAt-UNet --------------------------------------------------------------

@pytest.mark.parametrize("stages", range(1, MAX_STAGES + 1))
def test_unet_shapes_per_stage(stages):
    net = SmaAtUNet((7, 13), (3, 5), stages, base_channels=2, seed=0)
    assert net.padded_shape == tuple(-(-n // 2 ** stages) * 2 ** stages for n in (7, 13))
    out = net.forward(np.random.default_rng(0).normal(size=(2, 7, 13)))
    assert out.shape == (2, 15)
    assert cnn_forward(net, np.zeros((7, 13))).shape == (3, 5)


def test_unet_validation():
    with pytest.raises(ValueError, match="stages"):
        SmaAtUNet((8, 8), (4, 4), MAX_STAGES + 1)
    with pytest.raises(DimensionError):
        SmaAtUNet((8, 8), (9, 4), 1)
    with pytest.raises(DimensionError, match="crop"):
        SmaAtUNet((8, 8), (4, 4), 1, crop_offsets=(6, 0))
    net = SmaAtUNet((8, 8), (4, 4), 1, base_channels=2)
    with pytest.raises(DimensionError, match="input stage"):
        net.forward(np.zeros((1, 7, 8)))
    assert stage_channels(3, 16) == [16, 32, 64, 64]
    assert reflect_padding((7, 16), 2) == ((0, 1), (0, 0))


def test_unet_config_round_trip():
    net = SmaAtUNet((8, 12), (4, 6), 2, base_channels=3, crop_offsets=(2, 3), seed=4)
    clone = build_model(net.config())
    load_state(clone, state_dict(net))
    x = np.random.default_rng(2).normal(size=(3, 8, 12))
    np.testing.assert_array_equal(clone.forward(x), net.forward(x))
    with pytest.raises(DimensionError):
        load_state(clone, {k: v for k, v in list(state_dict(net).items())[1:]})


# -- MLR ---------------------------------------------------------------------

def _problem(rng, T=80, G_in=6, G_out=3):
    X = rng.normal(size=(T, G_in))
    Y = X @ rng.normal(size=(G_in, G_out)) + 0.1 * rng.normal(size=(T, G_out)) + 1.5
    return X, Y


def test_closed_form_recovers_coefficients(rng):
    X = rng.normal(size=(500, 4))
    B = rng.normal(size=(4, 2))
    m = mlr_fit_closed_form(X, X @ B + 3.0)
    np.testing.assert_allclose(m.beta, B.T, atol=1e-10)
    np.testing.assert_allclose(m.beta0, 3.0, atol=1e-10)


def test_singular_system_needs_ridge(rng):
    X = rng.normal(size=(20, 3))
    X = np.column_stack([X, X[:, 0]])
    with pytest.raises(SingularSystemError, match="lam > 0"):
        mlr_fit_closed_form(X, rng.normal(size=(20, 1)))
    assert np.all(np.isfinite(mlr_fit_closed_form(X, rng.normal(size=(20, 1)), 0.1).beta))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.0, 5.0))
def test_mlr_permutation_equivariance(seed, lam):
    rng = np.random.default_rng(seed)
    X, Y = _problem(rng)
    a = mlr_fit_closed_form(X, Y, lam)
    rows = rng.permutation(len(X))
    cols = rng.permutation(X.shape[1])
    b = mlr_fit_closed_form(X[rows][:, cols], Y[rows], lam)
    np.testing.assert_allclose(b.beta, a.beta[:, cols], atol=1e-10)
    np.testing.assert_allclose(b.beta0, a.beta0, atol=1e-10)


def test_ridge_lambda_matches_training_objective(rng):
    """The closed-form ridge solution is a stationary point of MSE + wd/2 |beta|^2."""
    X, Y = _problem(rng)
    wd = 0.05
    m = mlr_fit_closed_form(X, Y, ridge_lambda(wd, len(X), Y.shape[1]))
    diff = m.forward(X) - Y
    m.zero_grads()
    m.backward(2.0 * diff / diff.size)
    g = dict(m.named_grads())
    np.testing.assert_allclose(g["beta"] + wd * m.beta, 0, atol=1e-12)
    np.testing.assert_allclose(g["beta0"], 0, atol=1e-12)


def test_mlr_shape_checks(rng):
    m = MlrModel(3, 2)
    with pytest.raises(DimensionError):
        m.forward(np.zeros((4, 5)))
    with pytest.raises(ValueError):
        mlr_fit_closed_form(np.zeros((1, 2)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        mlr_fit_closed_form(*_problem(rng), lam=-1.0)


# -- training ----------------------------------------------------------------

def _unet_data(rng, n=24):
    x = rng.normal(size=(n, 8, 8))
    y = (x[:, 2:6, 2:6] ** 2).reshape(n, -1)
    return x, y


def test_training_is_deterministic(rng):
    x, y = _unet_data(rng)
    spec = TrainSpec(lr=1e-2, epochs=3, batch_size=8, seed=5)
    runs = [train(SmaAtUNet((8, 8), (4, 4), 1, 2, seed=1), x[:16], y[:16], x[16:], y[16:], spec) for _ in range(2)]
    a, b = (state_dict(m) for m, _ in runs)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert runs[0][1].val_mse == runs[1][1].val_mse
    other, _ = train(SmaAtUNet((8, 8), (4, 4), 1, 2, seed=1), x[:16], y[:16], x[16:], y[16:],
                     TrainSpec(lr=1e-2, epochs=3, batch_size=8, seed=6))
    assert any(not np.array_equal(a[k], state_dict(other)[k]) for k in a)


def test_training_keeps_best_validation_snapshot(rng):
    X, Y = _problem(rng, T=120)
    model, log = train(MlrModel(6, 3), X[:80], Y[:80], X[80:], Y[80:], TrainSpec(lr=0.3, epochs=30, batch_size=80))
    from s2sdown.regressors.training import evaluate_mse

    assert evaluate_mse(model, X[80:], Y[80:]) == pytest.approx(min(log.val_mse), rel=1e-12)
    assert log.best_val == min(log.val_mse)
    assert log.val_mse[log.best_epoch - 1] == log.best_val


def test_adam_converges_to_ridge_solution(rng):
    X, Y = _problem(rng, T=100)
    wd = 0.02
    model, _ = train(MlrModel(6, 3), X, Y, None, None, TrainSpec(lr=3e-2, weight_decay=wd, epochs=300,
                                                                  batch_size=100))
    ref = mlr_fit_closed_form(X, Y, ridge_lambda(wd, 100, 3))
    np.testing.assert_allclose(model.beta, ref.beta, atol=1e-3)


def test_divergence_raises_training_error(rng):
    X, Y = _problem(rng)
    with pytest.raises(TrainingError, match="epoch"), np.errstate(over="ignore", invalid="ignore"):
        train(MlrModel(6, 3), X, Y * 1e200, None, None, TrainSpec(lr=1.0, epochs=3))


def test_train_spec_validation():
    with pytest.raises(ValueError):
        TrainSpec(lr=0)
    with pytest.raises(ValueError):
        TrainSpec(epochs=0)


def test_fit_fixed_epochs_runs_exact_budget(rng):
    X, Y = _problem(rng)
    model = fit_fixed_epochs(MlrModel(6, 3), X, Y, TrainSpec(lr=1e-2, epochs=2))
    assert np.all(np.isfinite(model.beta))


def test_hyper_search_is_seeded_and_breaks_ties_by_small_lr():
    space = SearchSpace(lr=(1e-4, 1e-1), weight_decay=(1e-6, 1e-2))
    calls = []

    def fit_eval(lr, wd, fold):
        calls.append((lr, wd, fold))
        return 1.0, 7

    a = hyper_search(space, [0, 1], 5, fit_eval, seed=3)
    b = hyper_search(space, [0, 1], 5, fit_eval, seed=3)
    assert (a.lr, a.weight_decay) == (b.lr, b.weight_decay)
    assert a.lr == min(t[0] for t in a.trials)
    assert a.best_epochs == [7, 7] and len(calls) == 20
    with pytest.raises(ValueError):
        SearchSpace(lr=(1e-2, 1e-3), weight_decay=(1e-6, 1e-2))
    assert SearchSpace(lr=(1.0, 1.0), weight_decay=(2.0, 2.0)).sample(np.random.default_rng(0)) == (1.0, 2.0)


def test_fitted_regressor_save_load(tmp_path, rng):
    x, y = _unet_data(rng)
    xs, ys = fit_normalization(x.reshape(len(x), -1)), fit_normalization(y)
    net = SmaAtUNet((8, 8), (4, 4), 1, 2, seed=0)
    reg = FittedRegressor(net, xs, ys, extras={"residual.mean": np.ones(16)}, meta={"target_grid": [0, 1, 4, 0, 1, 4]})
    reg.save(tmp_path / "m.ckpt")
    back = FittedRegressor.load(tmp_path / "m.ckpt")
    flat = x.reshape(len(x), -1)
    np.testing.assert_array_equal(back.predict(flat), reg.predict(flat))
    assert back.predict(flat.reshape(4, 6, -1)).shape == (4, 6, 16)
    np.testing.assert_array_equal(back.extras["residual.mean"], np.ones(16))
    assert back.meta["target_grid"] == [0, 1, 4, 0, 1, 4]
