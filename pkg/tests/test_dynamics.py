"""Per-context Gaussian dynamics: shapes, likelihoods vs scipy, and
hand-rolled backprop vs finite differences."""

import math

import numpy as np
import pytest
import scipy.stats

from ctxmdp.dynamics import (
    ContextParams,
    NetworkSpec,
    forward_batch,
    init_params,
    linear_params,
    load_params,
    log_likelihood_and_grad,
    loglik_batch,
    predict,
    save_params,
    weighted_grad,
)


def test_spec_param_count_and_validation():
    spec = NetworkSpec(layer_sizes=(6, 32, 4))
    assert spec.in_dim == 6
    assert spec.out_dim == 4
    assert spec.n_params == (32 * 6 + 32) + (4 * 32 + 4) + 4
    with pytest.raises(ValueError):
        NetworkSpec(layer_sizes=(6,))
    with pytest.raises(ValueError):
        NetworkSpec(layer_sizes=(6, 0, 4))
    with pytest.raises(ValueError):
        NetworkSpec(layer_sizes=(6, 32, 4), activation="tanh")


def test_flatten_unflatten_roundtrip():
    spec = NetworkSpec(layer_sizes=(3, 8, 2))
    rng = np.random.default_rng(0)
    theta = init_params(spec, rng)
    vec = theta.flatten()
    assert vec.shape == (spec.n_params,)
    back = ContextParams.unflatten(spec, vec)
    assert np.array_equal(back.flatten(), vec)
    with pytest.raises(ValueError):
        ContextParams.unflatten(spec, vec[:-1])


def test_linear_wrap_is_exact():
    rng = np.random.default_rng(1)
    M = rng.standard_normal((2, 3))
    theta = linear_params(M, np.full(2, math.log(0.05)))
    for _ in range(50):
        x = rng.uniform(-3.0, 3.0, size=3)
        out, _ = forward_batch(theta, x[None, :])
        assert np.allclose(out[0], M @ x, atol=1e-14)


def test_predict_linear_mean_and_batch_consistency():
    rng = np.random.default_rng(2)
    A = np.array([[0.9, 0.1], [-0.2, 0.8]])
    B = np.array([[0.3], [0.5]])
    theta = linear_params(np.hstack([A - np.eye(2), B]), np.full(2, -3.0))
    s = rng.standard_normal(2)
    a = rng.standard_normal(1)
    pred = predict(theta, s, a)
    assert np.allclose(pred.mean, A @ s + B @ a, atol=1e-13)
    assert np.allclose(pred.std, np.exp(-3.0))
    S = rng.standard_normal((7, 2))
    Aa = rng.standard_normal((7, 1))
    batch = predict(theta, S, Aa)
    assert batch.mean.shape == (7, 2)
    for i in range(7):
        assert np.allclose(batch.mean[i], predict(theta, S[i], Aa[i]).mean)
    eps = rng.standard_normal(2)
    assert np.allclose(pred.sample(eps), pred.mean + pred.std * eps)


def test_loglik_matches_scipy_diag_gaussian():
    rng = np.random.default_rng(3)
    spec = NetworkSpec(layer_sizes=(5, 16, 3))
    theta = init_params(spec, rng, log_std_init=math.log(0.3))
    S = rng.standard_normal((20, 3))
    A = rng.standard_normal((20, 2))
    Sn = rng.standard_normal((20, 3))
    ll, _ = loglik_batch(theta, S, A, Sn)
    out, _ = forward_batch(theta, np.concatenate([S, A], axis=1))
    mean = S + out
    std = np.exp(theta.log_std)
    want = scipy.stats.norm(mean, std).logpdf(Sn).sum(axis=1)
    assert np.allclose(ll, want, rtol=1e-12)


def _flat_loglik(spec, vec, s, a, s_next):
    theta = ContextParams.unflatten(spec, vec)
    ll, _ = loglik_batch(theta, s[None, :], a[None, :], s_next[None, :])
    return float(ll[0])


def test_gradient_matches_directional_finite_difference():
    # 100 random (theta, transition) points; central differences along a
    # random direction, h small enough that no relu kink is crossed
    rng = np.random.default_rng(4)
    spec = NetworkSpec(layer_sizes=(4, 16, 16, 2))
    worst = 0.0
    for _ in range(100):
        theta = init_params(spec, rng, weight_std=0.4, log_std_init=math.log(0.5))
        vec = theta.flatten()
        s = rng.standard_normal(2)
        a = rng.standard_normal(2)
        s_next = rng.standard_normal(2)
        _, grad = log_likelihood_and_grad(theta, s, a, s_next)
        v = rng.standard_normal(vec.size)
        v /= np.linalg.norm(v)
        h = 1e-6
        fd = (
            _flat_loglik(spec, vec + h * v, s, a, s_next)
            - _flat_loglik(spec, vec - h * v, s, a, s_next)
        ) / (2 * h)
        rel = abs(grad @ v - fd) / max(1.0, abs(fd))
        worst = max(worst, rel)
    assert worst < 1e-5


def test_log_std_gradient_identity():
    # d loglik / d log_std_i = z_i^2 - 1 with z the standardized residual
    rng = np.random.default_rng(5)
    spec = NetworkSpec(layer_sizes=(3, 8, 2))
    theta = init_params(spec, rng, log_std_init=math.log(0.2))
    s, a, s_next = rng.standard_normal(2), rng.standard_normal(1), rng.standard_normal(2)
    _, grad = log_likelihood_and_grad(theta, s, a, s_next)
    pred = predict(theta, s, a)
    z = (s_next - pred.mean) / pred.std
    assert np.allclose(grad[-2:], z * z - 1.0, rtol=1e-12)


def test_weighted_grad_is_weighted_sum_of_single_grads():
    rng = np.random.default_rng(6)
    spec = NetworkSpec(layer_sizes=(3, 8, 2))
    theta = init_params(spec, rng)
    S = rng.standard_normal((5, 2))
    A = rng.standard_normal((5, 1))
    Sn = rng.standard_normal((5, 2))
    w = rng.uniform(0.1, 1.0, size=5)
    _, pack = loglik_batch(theta, S, A, Sn)
    got = weighted_grad(theta, pack, w)
    want = sum(
        w[i] * log_likelihood_and_grad(theta, S[i], A[i], Sn[i])[1] for i in range(5)
    )
    assert np.allclose(got, want, rtol=1e-10)


def test_save_load_roundtrip():
    rng = np.random.default_rng(7)
    spec = NetworkSpec(layer_sizes=(4, 12, 3))
    thetas = [init_params(spec, rng) for _ in range(3)]
    header, flat = save_params(thetas)
    assert header["n_contexts"] == 3
    back = load_params(header, flat)
    for t0, t1 in zip(thetas, back):
        assert np.array_equal(t0.flatten(), t1.flatten())
    with pytest.raises(ValueError):
        load_params(header, flat[:-1])
