"""Context chain type, stationary distributions, and spurious-context
removal via the stochastic-complement reduction."""

import warnings

import numpy as np
import pytest

from ctxmdp import ContextChain, StationaryError, distill, load_chain_csv, save_chain_csv, stationary_distribution
from conftest import random_chain

R3 = np.array(
    [
        [0.80, 0.15, 0.05],
        [0.10, 0.85, 0.05],
        [0.45, 0.45, 0.10],
    ]
)
RHO3 = np.array([0.5, 0.3, 0.2])

# hand-reduced two-state chain after removing state 2 from R3:
# escape probabilities from state 2 are (0.5, 0.5), reachback factor
# 1/(1 - 0.10), giving additions 0.05 * (0.5, 0.5) / 0.9
R3_REDUCED = np.array([[0.825, 0.175], [0.125, 0.875]])


def test_chain_validation():
    with pytest.raises(ValueError):
        ContextChain(np.array([0.5, 0.6]), np.eye(2))
    with pytest.raises(ValueError):
        ContextChain(np.array([0.5, 0.5]), np.array([[0.5, 0.6], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        ContextChain(np.array([1.0]), np.array([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        ContextChain(np.array([0.5, 0.5]), np.array([[1.1, -0.1], [0.5, 0.5]]))
    ch = ContextChain(np.array([0.5, 0.5]), np.array([[0.9, 0.1], [0.2, 0.8]]))
    assert ch.n_contexts == 2


def test_stationary_two_state_hand_value():
    ch = ContextChain(np.array([0.5, 0.5]), np.array([[0.7, 0.3], [0.2, 0.8]]))
    p = stationary_distribution(ch.R)
    assert np.allclose(p, [0.4, 0.6], atol=1e-12)


def test_stationary_random_chains_fixed_point():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        ch = random_chain(10, rng)
        p = stationary_distribution(ch.R)
        assert p.shape == (10,)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.max(np.abs(p @ ch.R - p)) < 1e-10


def test_stationary_k1():
    assert np.allclose(stationary_distribution(np.array([[1.0]])), [1.0])


def test_stationary_periodic_chain_resolved():
    # period-2 chain: power iteration alone cycles, solver must still work
    R = np.array([[0.0, 1.0], [1.0, 0.0]])
    p = stationary_distribution(R)
    assert np.allclose(p, [0.5, 0.5], atol=1e-10)


def test_distill_hand_example_mpc_mode():
    ch = ContextChain(RHO3, R3)
    res = distill(ch, epsilon=0.2, mode="mpc")
    assert res.kept == (0, 1)
    assert res.removed == (2,)
    assert np.allclose(res.chain.R, R3_REDUCED, atol=1e-12)
    assert np.allclose(res.chain.rho0, RHO3[:2] / RHO3[:2].sum(), atol=1e-12)


def test_distill_hand_example_policy_mode():
    ch = ContextChain(RHO3, R3)
    res = distill(ch, epsilon=0.2, mode="policy")
    assert res.chain.R.shape == (3, 3)
    assert np.allclose(res.chain.R[:, 2], 0.0)
    assert np.allclose(res.chain.R.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(res.chain.R[:2, :2], R3_REDUCED, atol=1e-12)
    # removed row routed by escape probabilities (0.5, 0.5)
    assert np.allclose(res.chain.R[2, :2], [0.5, 0.5], atol=1e-12)
    assert res.chain.rho0[2] == 0.0


def test_distill_stationary_proportionality():
    # kept-state stationary mass is preserved up to normalization
    for seed in range(30):
        rng = np.random.default_rng(seed)
        K = int(rng.integers(3, 8))
        ch = random_chain(K, rng)
        p = stationary_distribution(ch.R)
        order = np.argsort(p)
        eps = float(p[order[0]] * 1.5)
        if np.sum(p >= eps) < 2:
            continue
        res = distill(ch, epsilon=eps, mode="mpc")
        kept = np.array(res.kept)
        expected = p[kept] / p[kept].sum()
        q = stationary_distribution(res.chain.R)
        assert np.allclose(q, expected, atol=1e-9)
        assert np.allclose(res.chain.R.sum(axis=1), 1.0, atol=1e-12)


def test_distill_idempotent_after_removal():
    ch = ContextChain(RHO3, R3)
    once = distill(ch, epsilon=0.2, mode="mpc")
    again = distill(once.chain, epsilon=0.2, mode="mpc")
    assert again.removed == ()
    assert np.allclose(again.chain.R, once.chain.R)


def test_distill_empty_keep_falls_back_to_argmax():
    # every stationary mass sits below the threshold
    ch = ContextChain(RHO3, R3)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = distill(ch, epsilon=0.9, mode="mpc")
    assert len(res.kept) == 1
    assert caught and any(
        issubclass(w.category, RuntimeWarning) for w in caught
    )


def test_distill_rejects_bad_epsilon():
    ch = ContextChain(RHO3, R3)
    with pytest.raises(ValueError):
        distill(ch, epsilon=-0.1)
    with pytest.raises(ValueError):
        distill(ch, epsilon=0.2, mode="nonsense")


def test_chain_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    ch = random_chain(4, rng)
    path = tmp_path / "chain.csv"
    save_chain_csv(ch, str(path))
    back = load_chain_csv(str(path))
    assert np.array_equal(back.rho0, ch.rho0)
    assert np.array_equal(back.R, ch.R)


def test_stationary_error_type_exists():
    assert issubclass(StationaryError, Exception)
