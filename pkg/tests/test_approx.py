import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsb import approx
from cdsb.approx import (DIRECT, RESIDUAL, AdamState, FeatureConfig, MlpDriftModel, MlpSpec, adam_step,
                         build_features, drift_from_json, feature_jacobian, fit_ridge_step, init_mlp,
                         mlp_forward, mlp_grad, mlp_inputs, ridge_fit, ridge_fit_retry, select_features,
                         zero_ridge_model)
from cdsb.chain import BACKWARD, FORWARD, linear_schedule
from cdsb.errors import IllConditioned, InvalidArgument
from cdsb.evaluate import mlp_gradient_errors


def _rbf_cfg(center, h):
    return FeatureConfig(1, 1, include_bias=False, include_linear=False,
                         rbf_centers=np.array([center]), rbf_bandwidths=np.array([h]))


def test_rbf_feature_at_center_and_at_one_bandwidth():
    cfg = _rbf_cfg([0.5, -1.0], 0.7)
    assert build_features([[0.5]], [[-1.0]], cfg)[0, 0] == pytest.approx(1.0)
    assert build_features([[0.5 + 0.7]], [[-1.0]], cfg)[0, 0] == pytest.approx(np.exp(-0.5))


def test_bias_only_features():
    cfg = FeatureConfig(2, 1, include_bias=True, include_linear=False)
    np.testing.assert_array_equal(build_features([[3.0, 4.0]], [[1.0]], cfg), [[1.0]])


def test_feature_jacobian_matches_finite_differences(rng):
    x = rng.standard_normal((50, 2))
    y = rng.standard_normal((50, 1))
    cfg = select_features(x, y, 6, seed=3)
    j = feature_jacobian(x[:3], y[:3], cfg)
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (build_features(x[:3] + e, y[:3], cfg) - build_features(x[:3] - e, y[:3], cfg)) / (2 * h)
        np.testing.assert_allclose(j[:, :, i], fd, atol=1e-7)


def test_feature_config_validation():
    with pytest.raises(InvalidArgument):
        FeatureConfig(1, 1, rbf_centers=np.zeros((2, 3)), rbf_bandwidths=np.ones(2))
    with pytest.raises(InvalidArgument):
        FeatureConfig(1, 0, rbf_centers=np.zeros((1, 1)), rbf_bandwidths=np.zeros(1))


def test_ridge_by_hand():
    w = ridge_fit(np.array([[1.0], [2.0]]), np.array([[2.0], [4.0]]), 0.0)
    assert w[0, 0] == pytest.approx(2.0)


def test_ridge_shrinks_to_zero():
    x = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    t = np.random.default_rng(1).uniform(-1, 1, (20, 2))
    assert np.all(np.abs(ridge_fit(x, t, 1e12)) < 1e-6)


def test_ridge_interpolates_square_system():
    x = np.random.default_rng(0).standard_normal((5, 5)) + 3 * np.eye(5)
    t = np.random.default_rng(1).standard_normal((5, 2))
    w = ridge_fit(x, t, 0.0)
    np.testing.assert_allclose(x @ w, t, atol=1e-10)


def test_ridge_minimizes_objective(rng):
    x = rng.standard_normal((40, 4))
    t = rng.standard_normal((40, 2))
    lam = 0.3
    w = ridge_fit(x, t, lam)
    base = approx.ridge_objective(x, t, w, lam)
    for _ in range(20):
        assert approx.ridge_objective(x, t, w + 1e-3 * rng.standard_normal(w.shape), lam) > base


def test_ridge_singular_system_is_reported_or_regularized():
    x = np.ones((10, 2))
    with pytest.raises(IllConditioned):
        ridge_fit(x, np.ones((10, 1)), 0.0)
    w, lam = ridge_fit_retry(x, np.ones((10, 1)), 0.0)
    assert lam > 0 and np.all(np.isfinite(w))


def test_zero_ridge_model_is_identity():
    s = linear_schedule(4, 0.1, 0.2)
    m = zero_ridge_model(BACKWARD, s, 2, 1)
    x = np.random.default_rng(0).standard_normal((3, 2))
    np.testing.assert_array_equal(m.mean(2, x, np.zeros((3, 1))), x)
    assert sorted(m.steps) == [1, 2, 3, 4]


def test_ridge_step_recovers_affine_map(rng):
    s = linear_schedule(3, 0.1, 0.1)
    x = rng.standard_normal((500, 1))
    y = rng.standard_normal((500, 1))
    target = 0.7 * x + 0.2 * y - 0.1
    for par in (RESIDUAL, DIRECT):
        step = fit_ridge_step(x, y, target, 1, FORWARD, s, n_rbf=0, seed=0, parameterization=par, lam=0.0)
        model = approx.RidgeDriftModel(FORWARD, s, {0: step, 1: step, 2: step}, par)
        np.testing.assert_allclose(model.mean(1, x, y), target, atol=1e-9)


def test_ridge_model_json_roundtrip(rng):
    s = linear_schedule(2, 0.1, 0.1)
    x, y = rng.standard_normal((80, 1)), rng.standard_normal((80, 1))
    steps = {k: fit_ridge_step(x, y, np.sin(x) + y, k, BACKWARD, s, n_rbf=4, seed=k) for k in (1, 2)}
    m = approx.RidgeDriftModel(BACKWARD, s, steps)
    m2 = drift_from_json(m.to_json())
    np.testing.assert_array_equal(m.mean(1, x, y), m2.mean(1, x, y))


def test_mlp_zero_weights_residual_and_direct():
    params = [np.zeros((4, 3)), np.zeros(3), np.zeros((3, 1)), np.array([0.25])]
    x = np.array([[1.5], [-2.0]])
    y = np.array([[0.3], [0.1]])
    zeros = [np.zeros_like(p) for p in params]
    np.testing.assert_array_equal(mlp_forward(zeros, 1, x, y, parameterization=RESIDUAL, time_width=2), x)
    np.testing.assert_array_equal(mlp_forward(params, 1, x, y, parameterization=DIRECT, time_width=2),
                                  [[0.25], [0.25]])


def test_single_linear_layer_without_activation():
    w = np.array([[2.0], [-1.0]])
    params = [w, np.zeros(1)]
    out = mlp_forward(params, 0, [[3.0]], [[1.0]], parameterization=DIRECT, activation=False)
    assert out[0, 0] == pytest.approx(2 * 3 - 1)


def test_scalar_network_gradient_by_hand():
    params = [np.array([[1.5]]), np.zeros(1)]
    loss, grads = mlp_grad(params, np.array([[2.0]]), np.array([[1.0]]), activation=False)
    assert loss == pytest.approx((3.0 - 1.0) ** 2)
    assert grads[0][0, 0] == pytest.approx(2 * 2.0 * (3.0 - 1.0))


def test_zero_residual_zero_gradient(rng):
    params = [p + 0.1 * rng.standard_normal(p.shape) for p in init_mlp([3, 5, 2], 0)]
    inputs = rng.standard_normal((4, 3))
    targets, _ = approx._net(params, inputs)
    _, grads = mlp_grad(params, inputs, targets)
    assert all(np.all(g == 0) for g in grads)


def test_gradient_matches_finite_differences():
    assert max(mlp_gradient_errors(seed=5, points=3)) < 1e-5


def test_adam_zero_gradient_keeps_parameters():
    params = [np.array([1.0, -2.0])]
    state = AdamState.zeros_like(params)
    for _ in range(5):
        params2, state = adam_step(params, [np.zeros(2)], state, 0.1)
    np.testing.assert_array_equal(params2[0], params[0])


def test_adam_first_step_moves_by_learning_rate():
    params = [np.array([0.0, 0.0])]
    new, _ = adam_step(params, [np.array([3.0, -0.01])], AdamState.zeros_like(params), 1e-3, eps=1e-16)
    np.testing.assert_allclose(new[0], [-1e-3, 1e-3], rtol=1e-9)


def test_adam_opposite_gradients_shrink_update():
    params = [np.zeros(1)]
    st_ = AdamState.zeros_like(params)
    p1, st_ = adam_step(params, [np.array([1.0])], st_, 1e-2)
    p2, st_ = adam_step(p1, [np.array([-1.0])], st_, 1e-2)
    assert abs(p2[0][0] - p1[0][0]) < 1e-2


def test_mlp_model_json_roundtrip(rng):
    s = linear_schedule(3, 0.1, 0.1)
    spec = MlpSpec(hidden=(6,), time_embedding=4, iterations=1)
    params = [p + 0.1 * rng.standard_normal(p.shape) for p in init_mlp([1 + 1 + 4, 6, 1], 0)]
    m = MlpDriftModel(FORWARD, s, params, spec, RESIDUAL, np.array([0.1, 0.2]), np.array([1.5, 0.5]))
    m2 = drift_from_json(m.to_json())
    x, y = rng.standard_normal((5, 1)), rng.standard_normal((5, 1))
    np.testing.assert_array_equal(m.mean(1, x, y), m2.mean(1, x, y))


def test_mlp_inputs_standardize_before_embedding():
    z = mlp_inputs(3, [[2.0]], [[4.0]], 4, shift=np.array([1.0, 2.0]), scale=np.array([2.0, 4.0]))
    np.testing.assert_allclose(z[0, :2], [0.5, 0.5])
    assert z.shape == (1, 6)


@given(k=st.integers(0, 500), width=st.integers(2, 32))
@settings(max_examples=40, deadline=None)
def test_time_embedding_bounded(k, width):
    e = approx.time_embedding(k, width)
    assert e.shape == (1, width) and np.all(np.abs(e) <= 1.0)
