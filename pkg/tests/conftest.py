"""Shared helpers: random problem instances and independent oracles.

The enumeration oracle here deliberately reimplements smoothing by brute
force over all context sequences so library results are checked against
an implementation that shares no code with the package.
"""

from __future__ import annotations

from itertools import product

import numpy as np
import pytest

from ctxmdp import ContextChain, Trajectory
from ctxmdp.dynamics import NetworkSpec, init_params, loglik_batch


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def random_chain(K: int, rng: np.random.Generator, floor: float = 0.05) -> ContextChain:
    rho0 = rng.random(K) + floor
    rho0 /= rho0.sum()
    R = rng.random((K, K)) + floor
    R /= R.sum(axis=1, keepdims=True)
    return ContextChain(rho0, R)


def random_thetas(K, state_dim, action_dim, hidden, rng, log_std_init=np.log(0.3)):
    spec = NetworkSpec((state_dim + action_dim, *hidden, state_dim))
    return [init_params(spec, rng, log_std_init=log_std_init) for _ in range(K)]


def random_traj(state_dim, action_dim, T, rng, env_name="test") -> Trajectory:
    return Trajectory(
        states=rng.standard_normal((T + 1, state_dim)),
        actions=rng.standard_normal((T, action_dim)),
        true_z=None,
        env_name=env_name,
        seed=None,
    )


def loglik_table(thetas, traj) -> np.ndarray:
    """Per-transition per-context log likelihoods, (T, K)."""
    return np.stack(
        [
            loglik_batch(th, traj.states[:-1], traj.actions, traj.states[1:])[0]
            for th in thetas
        ],
        axis=1,
    )


def enumerate_posterior(rho0, R, ll):
    """Brute-force smoothing over all K^T context sequences.

    rho0 and R may be unnormalized (used for finite-difference checks of
    chain gradients); ll is the (T, K) log-likelihood table.  Returns
    (log_evidence, marginals (T, K), pairwise (T-1, K, K)).
    """
    T, K = ll.shape
    with np.errstate(divide="ignore"):
        log_rho0 = np.log(rho0)
        log_R = np.log(R)
    lps = []
    seqs = list(product(range(K), repeat=T))
    for zs in seqs:
        lp = log_rho0[zs[0]] + ll[0, zs[0]]
        for t in range(1, T):
            lp += log_R[zs[t - 1], zs[t]] + ll[t, zs[t]]
        lps.append(lp)
    lps = np.asarray(lps)
    m = lps.max()
    tot = m + np.log(np.sum(np.exp(lps - m)))
    w = np.exp(lps - tot)
    marg = np.zeros((T, K))
    pair = np.zeros((max(T - 1, 0), K, K))
    for wi, zs in zip(w, seqs):
        for t in range(T):
            marg[t, zs[t]] += wi
        for t in range(T - 1):
            pair[t, zs[t], zs[t + 1]] += wi
    return float(tot), marg, pair


@pytest.fixture(scope="session")
def linear_env():
    from ctxmdp.envs import make_switching_linear

    return make_switching_linear()
