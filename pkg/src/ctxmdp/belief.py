"""Recursive context belief filtering and offline decoding.

The filter carries the posterior of the context that generated the most
recent observed transition.  One step multiplies the chain-propagated
belief by the per-context transition likelihoods and renormalizes, all in
log space; run from the start of a trajectory it reproduces the
normalized forward messages exactly.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .chain import ContextChain
from .dynamics import ContextParams, loglik_batch
from .inference import message_pass
from .special import logsumexp
from .trajectory import Trajectory


class BeliefUnderflowError(RuntimeError):
    """Every context assigned zero likelihood to the observed transition."""


@dataclass(frozen=True)
class Belief:
    """Probability vector over contexts."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("belief must be a probability vector")

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))


def _transition_loglik(
    thetas: list[ContextParams], s: np.ndarray, a: np.ndarray, s_next: np.ndarray
) -> np.ndarray:
    s = np.atleast_1d(np.asarray(s, dtype=float))[None, :]
    a = np.atleast_1d(np.asarray(a, dtype=float))[None, :]
    s_next = np.atleast_1d(np.asarray(s_next, dtype=float))[None, :]
    return np.array([loglik_batch(t, s, a, s_next)[0][0] for t in thetas])


def belief_step(
    b: Belief,
    s: np.ndarray,
    a: np.ndarray,
    s_next: np.ndarray,
    chain: ContextChain,
    thetas: list[ContextParams],
) -> Belief:
    """One filter update: b'_i proportional to
    p(s_next | s, a, theta_i) * sum_j R_ji b_j."""
    ll = _transition_loglik(thetas, s, a, s_next)
    propagated = b.probs @ chain.R
    with np.errstate(divide="ignore"):
        log_num = ll + np.log(propagated)
    return _normalize(log_num)


def initial_belief(
    s: np.ndarray,
    a: np.ndarray,
    s_next: np.ndarray,
    chain: ContextChain,
    thetas: list[ContextParams],
) -> Belief:
    """Posterior of the first transition's context: likelihood times rho0
    (the first context is drawn from rho0, not propagated)."""
    ll = _transition_loglik(thetas, s, a, s_next)
    with np.errstate(divide="ignore"):
        log_num = ll + np.log(chain.rho0)
    return _normalize(log_num)


def _normalize(log_num: np.ndarray) -> Belief:
    norm = logsumexp(log_num)
    if not np.isfinite(norm):
        raise BeliefUnderflowError(
            "all contexts at zero posterior mass; cannot normalize belief"
        )
    return Belief(np.exp(log_num - norm))


def filter_trajectory(
    chain: ContextChain, thetas: list[ContextParams], traj: Trajectory
) -> np.ndarray:
    """Filtered beliefs (T, K): row t is the posterior of transition t's
    context given transitions 0..t."""
    out = np.empty((traj.T, chain.n_contexts))
    b = initial_belief(
        traj.states[0], traj.actions[0], traj.states[1], chain, thetas
    )
    out[0] = b.probs
    for t in range(1, traj.T):
        b = belief_step(
            b, traj.states[t], traj.actions[t], traj.states[t + 1], chain, thetas
        )
        out[t] = b.probs
    return out


def decode_contexts(
    chain: ContextChain, thetas: list[ContextParams], traj: Trajectory
) -> np.ndarray:
    """Most probable context per transition from the smoothed marginals
    (ties resolve to the lowest index)."""
    table = message_pass(chain, thetas, traj)
    return np.argmax(table.marginals, axis=1)


def decode_accuracy(
    decoded: np.ndarray,
    true_z: np.ndarray,
    n_contexts: int,
    best_permutation: bool = True,
    mask: np.ndarray | None = None,
) -> float:
    """Fraction of steps where the decoded context matches the truth.

    Learned labels are arbitrary, so by default the score is maximized
    over label permutations.  An optional boolean mask restricts the
    comparison to a subset of steps.
    """
    decoded = np.asarray(decoded, dtype=int)
    true_z = np.asarray(true_z, dtype=int)
    if decoded.shape != true_z.shape:
        raise ValueError("decoded and true context sequences differ in length")
    if mask is not None:
        decoded = decoded[mask]
        true_z = true_z[mask]
    if decoded.size == 0:
        raise ValueError("no steps to score")
    if not best_permutation:
        return float(np.mean(decoded == true_z))
    n = max(n_contexts, int(decoded.max()) + 1, int(true_z.max()) + 1)
    best = 0.0
    for perm in itertools.permutations(range(n)):
        mapped = np.asarray(perm)[decoded]
        best = max(best, float(np.mean(mapped == true_z)))
    return best


def write_belief_trace_csv(
    path,
    beliefs: np.ndarray,
    decoded_z: np.ndarray,
    true_z: np.ndarray | None = None,
) -> None:
    """CSV rows: t, b_0..b_{K-1}, decoded_z, true_z (blank if unknown)."""
    T, K = beliefs.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["t"] + [f"b_{k}" for k in range(K)] + ["decoded_z", "true_z"]
        )
        for t in range(T):
            row = [t] + [f"{b:.17g}" for b in beliefs[t]] + [int(decoded_z[t])]
            row.append("" if true_z is None else int(true_z[t]))
            writer.writerow(row)
