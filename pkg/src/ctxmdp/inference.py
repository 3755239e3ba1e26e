"""Variational fitting of the switching dynamics model.

The posterior family is factorized: point masses on the dynamics
parameters and the top-level stick fractions, and an independent Beta
per row stick fraction with shapes (mu_hat[j,k], mu_hat_row[j] -
cumsum(mu_hat[j,:k+1])).  The objective is a Monte-Carlo evidence bound:
scaled expected log evidence of the batch under sampled chains, minus the
analytic per-stick KL to the prior, plus the log prior of the point
estimates.  Chain gradients flow through the sampled sticks by the
implicit reparameterization identity; dynamics gradients by posterior-
weighted backprop through the forward-backward marginals.
"""

from __future__ import annotations

import math
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from .chain import ContextChain, distill
from .prior import (
    BetaParams,
    HdpHyper,
    dirichlet_row_priors,
    gem_weights,
    kl_beta,
    log_prior,
    rows_from_mu,
    sticky_row_priors,
    beta_implicit_grad,
)
from .special import (
    inv_softplus,
    logit,
    logsumexp,
    sample_beta,
    sigmoid,
    softplus,
    spawn_rngs,
)
from .trajectory import Trajectory

_STICK_EPS = 1e-12
PRIOR_KINDS = ("hdp", "dirichlet", "mle")


class EvidenceUnderflowError(RuntimeError):
    """Likelihood mass vanished on every context at some timestep."""

    def __init__(self, t: int):
        super().__init__(f"evidence underflow: all contexts at -inf at t={t}")
        self.t = t


@dataclass
class VariationalParams:
    """Point estimates and Beta-stick shapes of the posterior.

    nu_hat: (K-1,) free top-level stick fractions in (0, 1).
    mu_hat: (K+1, K-1) first Beta shapes per row stick.
    mu_hat_row: (K+1,) row totals; the second shape of stick k in row j is
        mu_hat_row[j] - sum(mu_hat[j, :k+1]) and must stay positive.
    thetas: one ContextParams per context.
    active: boolean context mask maintained by distillation-during-training.
    """

    nu_hat: np.ndarray
    mu_hat: np.ndarray
    mu_hat_row: np.ndarray
    thetas: list[dyn.ContextParams]
    active: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        K = len(self.thetas)
        self.nu_hat = np.asarray(self.nu_hat, dtype=float)
        self.mu_hat = np.asarray(self.mu_hat, dtype=float)
        self.mu_hat_row = np.asarray(self.mu_hat_row, dtype=float)
        if self.nu_hat.shape != (max(K - 1, 0),):
            raise ValueError(f"nu_hat must have length K-1={K - 1}")
        if self.mu_hat.shape != (K + 1, max(K - 1, 0)):
            raise ValueError(f"mu_hat must be (K+1, K-1), got {self.mu_hat.shape}")
        if self.mu_hat_row.shape != (K + 1,):
            raise ValueError("mu_hat_row must have length K+1")
        if K > 1 and (np.any(self.nu_hat <= 0) or np.any(self.nu_hat >= 1)):
            raise ValueError("nu_hat entries must lie in (0, 1)")
        if np.any(self.mu_hat <= 0) or np.any(self.mu_hat_row <= 0):
            raise ValueError("mu_hat and mu_hat_row must be positive")
        tail = self.mu_hat_row[:, None] - np.cumsum(self.mu_hat, axis=1)
        if self.mu_hat.size and np.any(tail <= 0):
            raise ValueError("row totals leave a nonpositive second Beta shape")
        if self.active is None:
            self.active = np.ones(K, dtype=bool)
        else:
            self.active = np.asarray(self.active, dtype=bool)
            if self.active.shape != (K,):
                raise ValueError("active mask must have length K")
        if not self.active.any():
            raise ValueError("at least one context must stay active")

    @property
    def K(self) -> int:
        return len(self.thetas)

    def beta_shapes(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """First and second Beta shapes of row j's free sticks."""
        a = self.mu_hat[j]
        b = self.mu_hat_row[j] - np.cumsum(a)
        return a, b

    def copy(self) -> "VariationalParams":
        return VariationalParams(
            nu_hat=self.nu_hat.copy(),
            mu_hat=self.mu_hat.copy(),
            mu_hat_row=self.mu_hat_row.copy(),
            thetas=[
                dyn.ContextParams.unflatten(t.spec, t.flatten()) for t in self.thetas
            ],
            active=self.active.copy(),
        )


@dataclass(frozen=True)
class MessageTable:
    """Forward/backward quantities of one trajectory, all in log space
    except the normalized marginals."""

    log_forward: np.ndarray   # (T, K)
    log_backward: np.ndarray  # (T, K)
    log_evidence: float
    marginals: np.ndarray     # (T, K), rows sum to 1
    pairwise: np.ndarray      # (T-1, K, K), slabs sum to 1


@dataclass
class TrainConfig:
    kind: str = "hdp"
    epochs: int = 50
    batch_size: int = 50
    lr_theta: float = 5e-3
    lr_mu: float = 1e-2
    lr_nu: float = 1e-2
    clip_norm: float = 10.0
    n_mu_samples: int = 1
    distill_every: int | None = None
    epsilon_train: float = 0.01
    hidden_sizes: tuple[int, ...] = (32,)
    log_std_init: float = math.log(0.1)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"kind must be one of {PRIOR_KINDS}, got {self.kind!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.n_mu_samples < 1:
            raise ValueError("epochs, batch_size, n_mu_samples must be >= 1")


# ---------------------------------------------------------------------------
# message passing


def _loglik_tensor(
    thetas: list[dyn.ContextParams],
    states: np.ndarray,
    actions: np.ndarray,
    active: np.ndarray | None = None,
    want_caches: bool = False,
):
    """Log densities (n, K) of stacked transitions under every context."""
    n = actions.shape[0]
    K = len(thetas)
    ll = np.zeros((n, K))
    caches = [None] * K
    s, s_next = states[:-1], states[1:]
    for k in range(K):
        if active is not None and not active[k]:
            continue
        ll[:, k], caches[k] = dyn.loglik_batch(thetas[k], s, actions, s_next)
    return (ll, caches) if want_caches else ll


def _forward_backward(
    log_rho0: np.ndarray, log_R: np.ndarray, ll: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched log-space recursions.  ll has shape (B, T, K)."""
    B, T, K = ll.shape
    logf = np.empty((B, T, K))
    logf[:, 0, :] = log_rho0[None, :] + ll[:, 0, :]
    for t in range(1, T):
        prev = logf[:, t - 1, :, None] + log_R[None, :, :]
        logf[:, t, :] = ll[:, t, :] + logsumexp(prev, axis=1)
    logb = np.zeros((B, T, K))
    for t in range(T - 1, 0, -1):
        nxt = log_R[None, :, :] + ll[:, t, None, :] + logb[:, t, None, :]
        logb[:, t - 1, :] = logsumexp(nxt, axis=2)
    logZ = logsumexp(logf[:, T - 1, :], axis=1)
    if not np.all(np.isfinite(logZ)):
        b = int(np.flatnonzero(~np.isfinite(np.atleast_1d(logZ)))[0])
        finite_rows = np.isfinite(logf[b]).any(axis=1)
        t_bad = int(np.flatnonzero(~finite_rows)[0]) if not finite_rows.all() else T - 1
        raise EvidenceUnderflowError(t_bad)
    return logf, logb, np.atleast_1d(logZ)


def message_pass(
    chain: ContextChain, thetas: list[dyn.ContextParams], traj: Trajectory
) -> MessageTable:
    """Exact smoothing for one trajectory under a fixed chain and dynamics.

    Contexts index transitions: the context of transition t (state t to
    t+1) is drawn from rho0 at t=0 and from the previous context's row
    afterwards.
    """
    if chain.n_contexts != len(thetas):
        raise ValueError("chain size and number of context models differ")
    ll = _loglik_tensor(thetas, traj.states, traj.actions)[None, :, :]
    with np.errstate(divide="ignore"):
        log_rho0 = np.log(chain.rho0)
        log_R = np.log(chain.R)
    logf, logb, logZ = _forward_backward(log_rho0, log_R, ll)
    logf, logb = logf[0], logb[0]
    lm = logf + logb
    marg = np.exp(lm - logsumexp(lm, axis=1)[:, None])
    T = traj.T
    if T > 1:
        lp = (
            logf[:-1, :, None]
            + log_R[None, :, :]
            + ll[0, 1:, None, :]
            + logb[1:, None, :]
        )
        norm = logsumexp(lp.reshape(T - 1, -1), axis=1)
        pair = np.exp(lp - norm[:, None, None])
    else:
        pair = np.zeros((0, chain.n_contexts, chain.n_contexts))
    return MessageTable(
        log_forward=logf,
        log_backward=logb,
        log_evidence=float(logZ[0]),
        marginals=marg,
        pairwise=pair,
    )


def likelihood_grads(
    chain: ContextChain,
    thetas: list[dyn.ContextParams],
    traj: Trajectory,
    table: MessageTable,
) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Gradient of the trajectory log evidence.

    Returns (per-context theta gradients, d/d rho0, d/d R).  Uses the
    posterior identity: the theta gradient weights each transition's
    conditional score by its smoothed marginal; the chain gradient is the
    expected transition count divided by the probability.
    """
    K = chain.n_contexts
    ll_caches = _loglik_tensor(
        thetas, traj.states, traj.actions, want_caches=True
    )
    _, caches = ll_caches
    theta_grads = [
        dyn.weighted_grad(thetas[k], caches[k], table.marginals[:, k])
        for k in range(K)
    ]
    pair_sum = table.pairwise.sum(axis=0)
    mass_on_zero = (chain.R <= 0) & (pair_sum > 1e-9)
    if np.any(mass_on_zero):
        j, k = np.argwhere(mass_on_zero)[0]
        raise ValueError(
            f"posterior mass {pair_sum[j, k]:.3e} on zero-probability "
            f"transition ({j}, {k})"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        R_grad = np.where(chain.R > 0, pair_sum / chain.R, 0.0)
        rho0_grad = np.where(chain.rho0 > 0, table.marginals[0] / chain.rho0, 0.0)
    if np.any((chain.rho0 <= 0) & (table.marginals[0] > 1e-9)):
        k = int(np.argwhere((chain.rho0 <= 0) & (table.marginals[0] > 1e-9))[0])
        raise ValueError(f"posterior mass on zero-probability initial context {k}")
    return theta_grads, rho0_grad, R_grad


# ---------------------------------------------------------------------------
# chains from sticks, masking, and the stick-gradient chain rule


def _chain_rows_from_sticks(mu: np.ndarray) -> np.ndarray:
    """Rows (K+1, K) from free sticks (K+1, K-1); last stick forced to 1."""
    n_rows = mu.shape[0]
    K = mu.shape[1] + 1
    rows = np.empty((n_rows, K))
    for j in range(n_rows):
        rows[j] = rows_from_mu(np.append(mu[j], 1.0))
    return rows


def _mask_chain(
    rows: np.ndarray, active: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero the columns of inactive contexts and renormalize each row.

    Returns (rho0, R, row_sums) where row_sums are the pre-normalization
    masked sums needed by the gradient chain rule.
    """
    masked = rows * active[None, :].astype(float)
    sums = masked.sum(axis=1)
    if np.any(sums <= 0):
        raise ValueError("masking removed all probability mass from a row")
    normed = masked / sums[:, None]
    return normed[0], normed[1:], sums


def _masked_row_grad(
    g_masked: np.ndarray, row_masked: np.ndarray, active: np.ndarray, S: float
) -> np.ndarray:
    """Pull dL/d(masked row) back to dL/d(raw row) through mask+renormalize."""
    C = float(g_masked @ row_masked)
    return active.astype(float) * (g_masked - C) / S


def _stick_grads_from_row_grads(
    mu: np.ndarray, rows_raw: np.ndarray, g_rows: np.ndarray
) -> np.ndarray:
    """dL/d(stick fractions) (R, K-1) given dL/d(raw rows) (R, K).

    rho_l = mu_l * prod_{i<l}(1 - mu_i): the derivative w.r.t. mu_k is the
    prefix product at l=k and -rho_l/(1-mu_k) for l > k.
    """
    n_rows, Km1 = mu.shape
    if Km1 == 0:
        return np.zeros((n_rows, 0))
    prefix = rows_raw[:, :Km1] / mu
    W = g_rows * rows_raw
    # suffix[:, l] = sum_{l' >= l} W[:, l']; entries after stick k start at k+1
    suffix = np.flip(np.cumsum(np.flip(W, axis=1), axis=1), axis=1)
    return g_rows[:, :Km1] * prefix - suffix[:, 1:] / (1.0 - mu)


def _sample_sticks(vp: VariationalParams, rng: np.random.Generator) -> np.ndarray:
    """One Monte-Carlo draw of every row's free sticks, clipped inside (0,1)."""
    K = vp.K
    out = np.empty((K + 1, max(K - 1, 0)))
    for j in range(K + 1):
        a, b = vp.beta_shapes(j)
        for k in range(K - 1):
            out[j, k] = sample_beta(rng, float(a[k]), float(b[k]))
    return np.clip(out, _STICK_EPS, 1.0 - _STICK_EPS)


def _prior_shapes(
    vp: VariationalParams, hyper: HdpHyper, kind: str
) -> list[list[BetaParams]] | None:
    """Per-row per-stick prior Beta shapes, or None for the mle kind."""
    if kind == "mle":
        return None
    if kind == "hdp":
        beta = gem_weights(np.append(vp.nu_hat, 1.0)).beta
        return [sticky_row_priors(j, beta, hyper) for j in range(hyper.K + 1)]
    return [dirichlet_row_priors(j, hyper) for j in range(hyper.K + 1)]


def _kl_sum(vp: VariationalParams, priors: list[list[BetaParams]] | None) -> float:
    if priors is None:
        return 0.0
    total = 0.0
    for j in range(vp.K + 1):
        a, b = vp.beta_shapes(j)
        for k in range(vp.K - 1):
            total += kl_beta(BetaParams(float(a[k]), float(b[k])), priors[j][k])
    return total


def _point_prior(vp: VariationalParams, hyper: HdpHyper, kind: str) -> float:
    """Log prior of the point-estimated parameters entering the bound.

    For the sticky-Dirichlet kind the row prior is already accounted for
    by the per-stick KL decomposition, so only the dynamics term remains.
    """
    if kind == "mle":
        return 0.0
    if kind == "hdp":
        return log_prior(vp, hyper, "hdp")
    from .prior import normal_logpdf_sum

    return sum(
        normal_logpdf_sum(t.flatten(), hyper.theta_prior_std) for t in vp.thetas
    )


def extract_chain(vp: VariationalParams) -> ContextChain:
    """Expected chain under the factorized sticks, with the active-context
    mask applied (zero columns into pruned contexts, rows renormalized)."""
    K = vp.K
    if K == 1:
        return ContextChain(np.ones(1), np.ones((1, 1)))
    mean_sticks = np.empty((K + 1, K - 1))
    for j in range(K + 1):
        a, b = vp.beta_shapes(j)
        mean_sticks[j] = a / (a + b)
    rows = _chain_rows_from_sticks(mean_sticks)
    rho0, R, _ = _mask_chain(rows, vp.active)
    return ContextChain(rho0, R)


# ---------------------------------------------------------------------------
# the bound and its gradients


def _group_batch(batch: list[Trajectory]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = defaultdict(list)
    for i, traj in enumerate(batch):
        groups[traj.T].append(i)
    return dict(groups)


def _stack_group(batch: list[Trajectory], idx: list[int]):
    states = np.stack([batch[i].states for i in idx])   # (B, T+1, D)
    actions = np.stack([batch[i].actions for i in idx])  # (B, T, A)
    return states, actions


def _group_logliks(
    thetas: list[dyn.ContextParams],
    states: np.ndarray,
    actions: np.ndarray,
    active: np.ndarray,
    want_caches: bool = False,
):
    """Loglik tensor (B, T, K) for a stacked group, one network pass per
    context over all B*T transitions."""
    B, Tp1, D = states.shape
    T = Tp1 - 1
    flat_s = states[:, :-1, :].reshape(B * T, D)
    flat_a = actions.reshape(B * T, -1)
    flat_next = states[:, 1:, :].reshape(B * T, D)
    K = len(thetas)
    ll = np.zeros((B, T, K))
    caches = [None] * K
    for k in range(K):
        if not active[k]:
            continue
        llk, cache = dyn.loglik_batch(thetas[k], flat_s, flat_a, flat_next)
        ll[:, :, k] = llk.reshape(B, T)
        caches[k] = cache
    return (ll, caches) if want_caches else ll


def _sampled_evidence(
    mu: np.ndarray, active: np.ndarray, ll: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, tuple]:
    """Evidence and posterior aggregates of a group under one stick sample.

    Returns (sum log evidence, marginals (B,T,K), pair_sum (K,K),
    marg0_sum (K,), extras) where extras carries what the gradient chain
    rule needs.
    """
    rows = _chain_rows_from_sticks(mu)
    rho0, R, sums = _mask_chain(rows, active)
    with np.errstate(divide="ignore"):
        log_rho0 = np.log(rho0)
        log_R = np.log(R)
    logf, logb, logZ = _forward_backward(log_rho0, log_R, ll)
    lm = logf + logb
    marg = np.exp(lm - logsumexp(lm, axis=2)[:, :, None])
    B, T, K = ll.shape
    if T > 1:
        lp = (
            logf[:, :-1, :, None]
            + log_R[None, None, :, :]
            + ll[:, 1:, None, :]
            + logb[:, 1:, None, :]
        ) - logZ[:, None, None, None]
        pair_sum = np.exp(lp).sum(axis=(0, 1))
    else:
        pair_sum = np.zeros((K, K))
    marg0_sum = marg[:, 0, :].sum(axis=0)
    extras = (rows, rho0, R, sums)
    return float(logZ.sum()), marg, pair_sum, marg0_sum, extras


def _chain_stick_grads(
    mu: np.ndarray,
    active: np.ndarray,
    pair_sum: np.ndarray,
    marg0_sum: np.ndarray,
    extras: tuple,
) -> np.ndarray:
    """d(sum log evidence)/d(stick fractions) (K+1, K-1) for one sample."""
    rows_raw, rho0, R, sums = extras
    K = active.size
    g_rows_masked = np.zeros((K + 1, K))
    with np.errstate(divide="ignore", invalid="ignore"):
        g_rows_masked[0] = np.where(rho0 > 0, marg0_sum / rho0, 0.0)
        g_rows_masked[1:] = np.where(R > 0, pair_sum / R, 0.0)
    masked_rows = np.vstack([rho0[None, :], R])
    g_raw = np.empty_like(g_rows_masked)
    for j in range(K + 1):
        g_raw[j] = _masked_row_grad(
            g_rows_masked[j], masked_rows[j], active, float(sums[j])
        )
    return _stick_grads_from_row_grads(mu, rows_raw, g_raw)


@dataclass
class ElboGradients:
    """Gradient blocks in the coordinates of VariationalParams fields."""

    value: float
    d_nu: np.ndarray        # (K-1,)
    d_mu_hat: np.ndarray    # (K+1, K-1), holding row totals fixed
    d_mu_row: np.ndarray    # (K+1,)
    d_theta: np.ndarray     # (K, P)


def _shape_grads_to_field_grads(
    dA: np.ndarray, dB: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Convert per-shape gradients (a_jk, b_jk) to gradients w.r.t.
    (mu_hat holding row totals, mu_hat_row): a = mu_hat[j,k] and
    b_jk = mu_hat_row[j] - sum_{i<=k} mu_hat[j,i]."""
    d_mu_hat = dA - (
        np.flip(np.cumsum(np.flip(dB, axis=1), axis=1), axis=1)
    )
    d_mu_row = dB.sum(axis=1)
    return d_mu_hat, d_mu_row


def elbo_estimate(
    vp: VariationalParams,
    batch: list[Trajectory],
    hyper: HdpHyper,
    kind: str,
    n_samples: int = 1,
    rng: np.random.Generator | None = None,
    n_total: int | None = None,
) -> float:
    """Monte-Carlo evidence bound of a batch (higher is better)."""
    if rng is None:
        rng = np.random.default_rng(0)
    samples = [_sample_sticks(vp, rng) for _ in range(n_samples)]
    return _elbo_from_samples(vp, batch, hyper, kind, samples, n_total)


def _elbo_from_samples(
    vp: VariationalParams,
    batch: list[Trajectory],
    hyper: HdpHyper,
    kind: str,
    samples: list[np.ndarray],
    n_total: int | None = None,
) -> float:
    if kind not in PRIOR_KINDS:
        raise ValueError(f"unknown prior kind {kind!r}")
    N = len(batch) if n_total is None else n_total
    B = len(batch)
    groups = _group_batch(batch)
    lls = {}
    for T, idx in groups.items():
        states, actions = _stack_group(batch, idx)
        lls[T] = _group_logliks(vp.thetas, states, actions, vp.active)
    mc = 0.0
    for mu in samples:
        for T, idx in groups.items():
            if vp.K == 1:
                rho0 = np.ones(1)
                R = np.ones((1, 1))
                with np.errstate(divide="ignore"):
                    logf, logb, logZ = _forward_backward(
                        np.log(rho0), np.log(R), lls[T]
                    )
                mc += float(logZ.sum())
            else:
                ev, *_ = _sampled_evidence(mu, vp.active, lls[T])
                mc += ev
    mc /= max(len(samples), 1)
    priors = _prior_shapes(vp, hyper, kind)
    return (N / B) * mc - _kl_sum(vp, priors) + _point_prior(vp, hyper, kind)


def _kl_shape_grads(
    vp: VariationalParams, priors: list[list[BetaParams]] | None
) -> tuple[np.ndarray, np.ndarray]:
    """Central finite differences of the analytic KL w.r.t. each q shape."""
    K = vp.K
    dA = np.zeros((K + 1, max(K - 1, 0)))
    dB = np.zeros_like(dA)
    if priors is None:
        return dA, dB
    for j in range(K + 1):
        a, b = vp.beta_shapes(j)
        for k in range(K - 1):
            p = priors[j][k]
            qa, qb = float(a[k]), float(b[k])
            ha = min(1e-5 * (1.0 + qa), qa / 2)
            hb = min(1e-5 * (1.0 + qb), qb / 2)
            dA[j, k] = (
                kl_beta(BetaParams(qa + ha, qb), p)
                - kl_beta(BetaParams(qa - ha, qb), p)
            ) / (2 * ha)
            dB[j, k] = (
                kl_beta(BetaParams(qa, qb + hb), p)
                - kl_beta(BetaParams(qa, qb - hb), p)
            ) / (2 * hb)
    return dA, dB


def _nu_grad(vp: VariationalParams, hyper: HdpHyper, kind: str) -> np.ndarray:
    """Gradient of (-KL sum + log prior) w.r.t. nu_hat; only the hdp kind
    couples nu to the objective."""
    K = vp.K
    if kind != "hdp" or K == 1:
        return np.zeros(max(K - 1, 0))

    def kl_at(nu: np.ndarray) -> float:
        beta = gem_weights(np.append(nu, 1.0)).beta
        priors = [sticky_row_priors(j, beta, hyper) for j in range(K + 1)]
        return _kl_sum(vp, priors)

    g = np.zeros(K - 1)
    nu = vp.nu_hat
    for i in range(K - 1):
        h = min(1e-6 * (1.0 + abs(nu[i])), nu[i] / 2, (1.0 - nu[i]) / 2)
        up = nu.copy()
        up[i] += h
        dn = nu.copy()
        dn[i] -= h
        g[i] = -(kl_at(up) - kl_at(dn)) / (2 * h)
    # Beta(1, gamma) log density term on each free stick fraction
    g += -(hyper.gamma - 1.0) / (1.0 - nu)
    return g


def elbo_gradients(
    vp: VariationalParams,
    batch: list[Trajectory],
    hyper: HdpHyper,
    kind: str,
    n_samples: int = 1,
    rng: np.random.Generator | None = None,
    n_total: int | None = None,
) -> ElboGradients:
    """All gradient blocks of the bound, from a fresh set of stick samples."""
    if rng is None:
        rng = np.random.default_rng(0)
    samples = [_sample_sticks(vp, rng) for _ in range(n_samples)]
    return elbo_gradients_from_samples(vp, batch, hyper, kind, samples, n_total)


def elbo_gradients_from_samples(
    vp: VariationalParams,
    batch: list[Trajectory],
    hyper: HdpHyper,
    kind: str,
    samples: list[np.ndarray],
    n_total: int | None = None,
) -> ElboGradients:
    if kind not in PRIOR_KINDS:
        raise ValueError(f"unknown prior kind {kind!r}")
    K = vp.K
    N = len(batch) if n_total is None else n_total
    B = len(batch)
    scale = N / B
    n_s = len(samples)
    P = vp.thetas[0].spec.n_params

    groups = _group_batch(batch)
    lls = {}
    for T, idx in groups.items():
        states, actions = _stack_group(batch, idx)
        lls[T] = _group_logliks(
            vp.thetas, states, actions, vp.active, want_caches=True
        )

    mc_value = 0.0
    dA_lik = np.zeros((K + 1, max(K - 1, 0)))
    dB_lik = np.zeros_like(dA_lik)
    theta_weight_acc = {T: np.zeros_like(lls[T][0]) for T in groups}
    for mu in samples:
        sample_stick_grad = np.zeros((K + 1, max(K - 1, 0)))
        for T in groups:
            ll, _ = lls[T]
            if K == 1:
                with np.errstate(divide="ignore"):
                    _, _, logZ = _forward_backward(
                        np.log(np.ones(1)), np.log(np.ones((1, 1))), ll
                    )
                mc_value += float(logZ.sum())
                theta_weight_acc[T] += np.ones_like(ll)
                continue
            ev, marg, pair_sum, marg0_sum, extras = _sampled_evidence(
                mu, vp.active, ll
            )
            mc_value += ev
            theta_weight_acc[T] += marg
            sample_stick_grad += _chain_stick_grads(
                mu, vp.active, pair_sum, marg0_sum, extras
            )
        # implicit reparameterization: dx/dshape at this sample's sticks
        for j in range(K + 1):
            if j >= 1 and not vp.active[j - 1]:
                continue
            a, b = vp.beta_shapes(j)
            for k in range(K - 1):
                g = sample_stick_grad[j, k]
                if g == 0.0:
                    continue
                dxda, dxdb = beta_implicit_grad(
                    float(mu[j, k]), BetaParams(float(a[k]), float(b[k]))
                )
                dA_lik[j, k] += g * dxda
                dB_lik[j, k] += g * dxdb

    mc_value /= n_s
    dA_lik /= n_s
    dB_lik /= n_s

    # theta block: posterior-weighted backprop, averaged over samples
    d_theta = np.zeros((K, P))
    for T, idx in groups.items():
        _, caches = lls[T]
        Bg = len(idx)
        for k in range(K):
            if not vp.active[k]:
                continue
            w = (theta_weight_acc[T][:, :, k] / n_s).reshape(Bg * T)
            d_theta[k] += dyn.weighted_grad(vp.thetas[k], caches[k], w)
    d_theta *= scale
    if kind != "mle":
        std2 = hyper.theta_prior_std ** 2
        for k in range(K):
            d_theta[k] += -vp.thetas[k].flatten() / std2

    priors = _prior_shapes(vp, hyper, kind)
    dA_kl, dB_kl = _kl_shape_grads(vp, priors)

    value = (
        scale * mc_value - _kl_sum(vp, priors) + _point_prior(vp, hyper, kind)
    )
    d_nu = _nu_grad(vp, hyper, kind)

    d_mu_hat, d_mu_row = _shape_grads_to_field_grads(
        scale * dA_lik - dA_kl, scale * dB_lik - dB_kl
    )
    grads = ElboGradients(
        value=value,
        d_nu=d_nu,
        d_mu_hat=d_mu_hat,
        d_mu_row=d_mu_row,
        d_theta=d_theta,
    )
    return grads


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Plain Adam on one parameter array; step() returns the ascent update."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class _FitState:
    """Unconstrained coordinates: logits for nu, softplus inverses for the
    stick shapes and the positive row slack, flat theta vectors."""

    v_nu: np.ndarray       # (K-1,)
    u_mu: np.ndarray       # (K+1, K-1): mu_hat = softplus(u_mu)
    u_slack: np.ndarray    # (K+1,): row total = sum(mu_hat) + softplus(u_slack)
    theta_flat: np.ndarray  # (K, P)
    active: np.ndarray
    spec: dyn.NetworkSpec

    def to_vp(self) -> VariationalParams:
        mu_hat = softplus(self.u_mu)
        mu_row = mu_hat.sum(axis=1) + softplus(self.u_slack)
        thetas = [
            dyn.ContextParams.unflatten(self.spec, self.theta_flat[k])
            for k in range(self.theta_flat.shape[0])
        ]
        return VariationalParams(
            nu_hat=sigmoid(self.v_nu) if self.v_nu.size else self.v_nu.copy(),
            mu_hat=mu_hat if mu_hat.size else mu_hat,
            mu_hat_row=mu_row,
            thetas=thetas,
            active=self.active.copy(),
        )

    @classmethod
    def from_vp(cls, vp: VariationalParams) -> "_FitState":
        slack = vp.mu_hat_row - vp.mu_hat.sum(axis=1)
        return cls(
            v_nu=np.asarray(logit(vp.nu_hat)) if vp.nu_hat.size else vp.nu_hat.copy(),
            u_mu=np.asarray(inv_softplus(vp.mu_hat))
            if vp.mu_hat.size
            else vp.mu_hat.copy(),
            u_slack=np.asarray(inv_softplus(slack)),
            theta_flat=np.stack([t.flatten() for t in vp.thetas]),
            active=vp.active.copy(),
            spec=vp.thetas[0].spec,
        )

    def snapshot(self) -> tuple:
        return (
            self.v_nu.copy(), self.u_mu.copy(), self.u_slack.copy(),
            self.theta_flat.copy(), self.active.copy(),
        )

    def restore(self, snap: tuple) -> None:
        self.v_nu, self.u_mu, self.u_slack, self.theta_flat, self.active = (
            snap[0].copy(), snap[1].copy(), snap[2].copy(), snap[3].copy(),
            snap[4].copy(),
        )

    def finite(self) -> bool:
        return all(
            np.all(np.isfinite(arr))
            for arr in (self.v_nu, self.u_mu, self.u_slack, self.theta_flat)
        )


def init_variational_params(
    hyper: HdpHyper,
    kind: str,
    state_dim: int,
    action_dim: int,
    hidden_sizes: tuple[int, ...],
    rng: np.random.Generator,
    log_std_init: float = math.log(0.1),
) -> VariationalParams:
    """Posterior initialized at its prior: nu at the Beta(1, gamma) mean and
    each row's stick shapes equal to the prior shapes, so every KL starts
    at zero."""
    K = hyper.K
    nu0 = np.full(max(K - 1, 0), 1.0 / (1.0 + hyper.gamma))
    mu_hat = np.zeros((K + 1, max(K - 1, 0)))
    mu_row = np.zeros(K + 1)
    if K > 1:
        if kind == "dirichlet":
            prior_rows = [dirichlet_row_priors(j, hyper) for j in range(K + 1)]
        else:
            beta = gem_weights(np.append(nu0, 1.0)).beta
            prior_rows = [sticky_row_priors(j, beta, hyper) for j in range(K + 1)]
        for j in range(K + 1):
            a = np.array([p.a for p in prior_rows[j]])
            b = np.array([p.b for p in prior_rows[j]])
            mu_hat[j] = a
            # row total consistent with the last stick's second shape
            mu_row[j] = float(np.sum(a) + b[-1])
    else:
        mu_row[:] = 1.0  # unused but must be positive
    spec = dyn.NetworkSpec(
        layer_sizes=(state_dim + action_dim, *hidden_sizes, state_dim)
    )
    thetas = [
        dyn.init_params(spec, rng, weight_std=hyper.theta_prior_std,
                        log_std_init=log_std_init)
        for _ in range(K)
    ]
    return VariationalParams(
        nu_hat=nu0, mu_hat=mu_hat, mu_hat_row=mu_row, thetas=thetas
    )


def _distill_event(state: _FitState, epsilon: float) -> None:
    """Prune contexts whose masked expected chain carries occupancy below
    epsilon; pruned contexts are frozen from then on."""
    vp = state.to_vp()
    if vp.K == 1:
        return
    res = distill(extract_chain(vp), epsilon, mode="policy")
    keep = np.zeros(vp.K, dtype=bool)
    keep[list(res.kept)] = True
    state.active = state.active & keep
    if not state.active.any():
        state.active[int(np.argmax(res.stationary))] = True


def fit(
    dataset: list[Trajectory],
    hyper: HdpHyper,
    config: TrainConfig,
    init_vp: VariationalParams | None = None,
) -> tuple[VariationalParams, list[dict]]:
    """Stochastic ascent on the evidence bound over minibatches of
    trajectories.  Returns the fitted posterior and one log record per
    epoch with keys epoch/elbo/active_contexts/grad_norm_theta/
    grad_norm_mu/grad_norm_nu/wall_ms.

    Non-finite parameters abort the run and return the last finite epoch's
    parameters (the log's final record notes the abort).
    """
    if not dataset:
        raise ValueError("empty dataset")
    K = hyper.K
    state_dim = dataset[0].state_dim
    action_dim = dataset[0].action_dim
    shuffle_rng, sample_rng, init_rng = spawn_rngs(config.seed, 3)
    if init_vp is None:
        init_vp = init_variational_params(
            hyper, config.kind, state_dim, action_dim, config.hidden_sizes,
            init_rng, config.log_std_init,
        )
    if init_vp.K != K:
        raise ValueError("init_vp truncation does not match hyper.K")
    state = _FitState.from_vp(init_vp)

    adam_theta = Adam(config.lr_theta)
    adam_mu = Adam(config.lr_mu)
    adam_slack = Adam(config.lr_mu)
    adam_nu = Adam(config.lr_nu)

    N = len(dataset)
    log: list[dict] = []
    snap = state.snapshot()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(N)
        elbos, g_th, g_mu, g_nu = [], [], [], []
        aborted = False
        for lo in range(0, N, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = [dataset[i] for i in idx]
            vp = state.to_vp()
            grads = elbo_gradients(
                vp, batch, hyper, config.kind,
                n_samples=config.n_mu_samples, rng=sample_rng, n_total=N,
            )
            if not math.isfinite(grads.value):
                aborted = True
                break
            # freeze pruned contexts entirely
            for k in range(K):
                if not state.active[k]:
                    grads.d_theta[k] = 0.0
                    grads.d_mu_hat[k + 1] = 0.0
                    grads.d_mu_row[k + 1] = 0.0
            # chain rule into the unconstrained coordinates
            if K > 1:
                nu = sigmoid(state.v_nu)
                g_v = grads.d_nu * nu * (1.0 - nu)
                g_u_mu = (grads.d_mu_hat + grads.d_mu_row[:, None]) * sigmoid(
                    state.u_mu
                )
                g_u_slack = grads.d_mu_row * sigmoid(state.u_slack)
            else:
                g_v = np.zeros(0)
                g_u_mu = np.zeros_like(state.u_mu)
                g_u_slack = np.zeros_like(state.u_slack)
            g_theta = grads.d_theta

            norm_th = float(np.linalg.norm(g_theta))
            norm_mu = float(
                math.sqrt(np.linalg.norm(g_u_mu) ** 2 + np.linalg.norm(g_u_slack) ** 2)
            )
            norm_nu = float(np.linalg.norm(g_v))
            total = math.sqrt(norm_th ** 2 + norm_mu ** 2 + norm_nu ** 2)
            if config.clip_norm and total > config.clip_norm:
                f = config.clip_norm / total
                g_theta = g_theta * f
                g_u_mu = g_u_mu * f
                g_u_slack = g_u_slack * f
                g_v = g_v * f

            state.theta_flat += adam_theta.step(g_theta)
            if K > 1:
                state.u_mu += adam_mu.step(g_u_mu)
                state.u_slack += adam_slack.step(g_u_slack)
                state.v_nu += adam_nu.step(g_v)
            elbos.append(grads.value)
            g_th.append(norm_th)
            g_mu.append(norm_mu)
            g_nu.append(norm_nu)

        if aborted or not state.finite():
            state.restore(snap)
            log.append(
                {
                    "epoch": epoch,
                    "elbo": float("nan"),
                    "active_contexts": int(state.active.sum()),
                    "grad_norm_theta": 0.0,
                    "grad_norm_mu": 0.0,
                    "grad_norm_nu": 0.0,
                    "wall_ms": (time.perf_counter() - t0) * 1000.0,
                    "aborted": True,
                }
            )
            break

        if (
            config.distill_every
            and epoch % config.distill_every == 0
            and K > 1
        ):
            _distill_event(state, config.epsilon_train)

        snap = state.snapshot()
        log.append(
            {
                "epoch": epoch,
                "elbo": float(np.mean(elbos)) if elbos else float("nan"),
                "active_contexts": int(state.active.sum()),
                "grad_norm_theta": float(np.mean(g_th)) if g_th else 0.0,
                "grad_norm_mu": float(np.mean(g_mu)) if g_mu else 0.0,
                "grad_norm_nu": float(np.mean(g_nu)) if g_nu else 0.0,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
        )
    return state.to_vp(), log


# ---------------------------------------------------------------------------
# checkpoint serialization: JSON header + flat double array


def save_checkpoint(vp: VariationalParams, path_base: str) -> tuple[str, str]:
    """Write {base}.json (header) and {base}.bin (little-endian float64)."""
    import json

    theta_header, theta_flat = dyn.save_params(vp.thetas)
    arrays = [
        ("nu_hat", vp.nu_hat),
        ("mu_hat", vp.mu_hat),
        ("mu_hat_row", vp.mu_hat_row),
        ("theta_flat", theta_flat),
    ]
    header = {
        "K": vp.K,
        "active": vp.active.astype(int).tolist(),
        "network": theta_header,
        "arrays": [],
    }
    offset = 0
    chunks = []
    for name, arr in arrays:
        arr = np.asarray(arr, dtype="<f8")
        header["arrays"].append(
            {"name": name, "offset": offset, "shape": list(arr.shape)}
        )
        offset += arr.size
        chunks.append(arr.ravel())
    json_path = f"{path_base}.json"
    bin_path = f"{path_base}.bin"
    with open(json_path, "w") as fh:
        json.dump(header, fh, indent=1)
    np.concatenate(chunks).astype("<f8").tofile(bin_path)
    return json_path, bin_path


def load_checkpoint(path_base: str) -> VariationalParams:
    import json

    with open(f"{path_base}.json") as fh:
        header = json.load(fh)
    flat = np.fromfile(f"{path_base}.bin", dtype="<f8")
    arrs = {}
    for meta in header["arrays"]:
        size = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arrs[meta["name"]] = flat[
            meta["offset"] : meta["offset"] + size
        ].reshape(meta["shape"])
    thetas = dyn.load_params(header["network"], arrs["theta_flat"])
    return VariationalParams(
        nu_hat=arrs["nu_hat"],
        mu_hat=arrs["mu_hat"],
        mu_hat_row=arrs["mu_hat_row"],
        thetas=thetas,
        active=np.asarray(header["active"], dtype=bool),
    )
