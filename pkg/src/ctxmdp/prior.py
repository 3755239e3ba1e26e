"""Stick-breaking priors over context chains.

Two levels: a GEM(gamma) draw produces global context weights beta from
stick fractions nu; each row of the transition matrix then gets its own
stick-breaking Beta prior whose shapes blend alpha * beta with a sticky
bonus kappa on the row's self-transition.  A flat sticky-Dirichlet row
prior is available through the same per-stick decomposition, which is
exact (neutrality of the Dirichlet).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .special import beta_logpdf, betainc, digamma, log_beta

_SHAPE_CLAMP = 1e-8


@dataclass(frozen=True)
class HdpHyper:
    """Hyperparameters of the hierarchical sticky prior.

    K is the truncation level; gamma the top-level concentration; alpha the
    row-level concentration; kappa the sticky self-transition bonus;
    theta_prior_std the scale of the Gaussian prior on dynamics parameters.
    """

    K: int
    gamma: float = 2.0
    alpha: float = 1.0
    kappa: float = 0.0
    theta_prior_std: float = 0.1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"truncation K must be >= 1, got {self.K}")
        if self.gamma <= 0 or self.alpha <= 0:
            raise ValueError("gamma and alpha must be positive")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if self.theta_prior_std <= 0:
            raise ValueError("theta_prior_std must be positive")


@dataclass(frozen=True)
class BetaParams:
    """Shape pair of a Beta distribution."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"Beta shapes must be positive, got {self}")

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)


@dataclass(frozen=True)
class StickWeights:
    """Global context weights on the simplex, from broken sticks."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        object.__setattr__(self, "beta", beta)
        if np.any(beta < 0) or abs(beta.sum() - 1.0) > 1e-12:
            raise ValueError("stick weights must be a probability vector")


def _break_sticks(nu: np.ndarray) -> np.ndarray:
    """Map stick fractions to simplex weights; the last fraction is
    forced to 1 so the weights sum to exactly 1."""
    nu = np.array(nu, dtype=float)
    if nu.ndim != 1 or nu.size < 1:
        raise ValueError("need a 1-d vector of at least one stick fraction")
    nu[-1] = 1.0
    if np.any(nu <= 0) or np.any(nu > 1):
        raise ValueError("stick fractions must lie in (0, 1]")
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - nu[:-1])))
    return nu * remaining


def gem_weights(nu: np.ndarray) -> StickWeights:
    """Global weights beta_k = nu_k * prod_{i<k} (1 - nu_i)."""
    return StickWeights(_break_sticks(nu))


def rows_from_mu(mu_row: np.ndarray) -> np.ndarray:
    """One chain row from its stick fractions (last forced to 1)."""
    return _break_sticks(mu_row)


def sticky_row_priors(j: int, beta: np.ndarray, hyper: HdpHyper) -> list[BetaParams]:
    """Per-stick Beta prior shapes for row j of the chain.

    Row 0 is the initial distribution (no sticky bonus); rows 1..K are the
    transition rows, with the bonus kappa landing on the self-transition
    stick.  Returns K-1 shape pairs (the final stick is deterministic).
    Nonpositive second shapes (possible when beta has a zero tail) are
    clamped to 1e-8 with a warning.
    """
    beta = np.asarray(beta, dtype=float)
    K = hyper.K
    if beta.shape != (K,):
        raise ValueError(f"beta must have length K={K}, got {beta.shape}")
    if not (0 <= j <= K):
        raise ValueError(f"row index {j} outside 0..{K}")
    a = hyper.alpha * beta[: K - 1].copy()
    if 1 <= j <= K - 1:
        a[j - 1] += hyper.kappa
    total = hyper.alpha + hyper.kappa
    b = total - np.cumsum(a)
    if np.any(b <= 0):
        warnings.warn(
            f"row {j}: clamped {int(np.sum(b <= 0))} nonpositive prior "
            f"shape(s) to {_SHAPE_CLAMP}",
            RuntimeWarning,
        )
        b = np.maximum(b, _SHAPE_CLAMP)
    return [BetaParams(float(ai), float(bi)) for ai, bi in zip(a, b)]


def dirichlet_row_priors(j: int, hyper: HdpHyper) -> list[BetaParams]:
    """Stick-breaking decomposition of the flat sticky-Dirichlet row prior
    Dir(alpha/K + kappa on the self-transition).

    Exact: a Dirichlet's stick fractions are independent Betas with
    a_k = conc_k and b_k = sum of the concentrations after k.
    """
    K = hyper.K
    if not (0 <= j <= K):
        raise ValueError(f"row index {j} outside 0..{K}")
    conc = np.full(K, hyper.alpha / K)
    if j >= 1:
        conc[j - 1] += hyper.kappa
    tails = np.cumsum(conc[::-1])[::-1]
    return [BetaParams(float(conc[i]), float(tails[i + 1])) for i in range(K - 1)]


def kl_beta(q: BetaParams, p: BetaParams) -> float:
    """Analytic KL(Beta(q) || Beta(p))."""
    sq = q.a + q.b
    return (
        log_beta(p.a, p.b)
        - log_beta(q.a, q.b)
        + (q.a - p.a) * digamma(q.a)
        + (q.b - p.b) * digamma(q.b)
        + (p.a - q.a + p.b - q.b) * digamma(sq)
    )


def beta_implicit_grad(x: float, params: BetaParams) -> tuple[float, float]:
    """Derivatives dx/da, dx/db of a Beta(a, b) sample x held at fixed
    CDF level: dx/dshape = -dF/dshape / pdf(x).

    dF/dshape uses central finite differences of the regularized
    incomplete Beta with step 1e-5 * (1 + |shape|).
    """
    if not (0.0 < x < 1.0):
        raise ValueError(f"sample x={x} outside the open unit interval")
    a, b = params.a, params.b
    density = math.exp(beta_logpdf(x, a, b))
    ha = 1e-5 * (1.0 + abs(a))
    hb = 1e-5 * (1.0 + abs(b))
    dFda = (betainc(a + ha, b, x) - betainc(a - ha, b, x)) / (2.0 * ha)
    dFdb = (betainc(a, b + hb, x) - betainc(a, b - hb, x)) / (2.0 * hb)
    return -dFda / density, -dFdb / density


def normal_logpdf_sum(x: np.ndarray, std: float) -> float:
    """Sum of independent N(0, std^2) log densities over a flat array."""
    x = np.asarray(x, dtype=float)
    n = x.size
    return float(
        -0.5 * np.sum((x / std) ** 2) - n * math.log(std) - 0.5 * n * math.log(2 * math.pi)
    )


def log_prior(vp, hyper: HdpHyper, kind: str) -> float:
    """Log prior density of the point-estimated parameters.

    kind="hdp": Beta(1, gamma) on each free top-level stick fraction plus a
    Gaussian on the flattened dynamics parameters.  kind="dirichlet":
    sticky-Dirichlet log density of each expected chain row plus the same
    Gaussian term.  kind="mle": 0.
    """
    if kind == "mle":
        return 0.0
    theta_term = sum(
        normal_logpdf_sum(theta.flatten(), hyper.theta_prior_std)
        for theta in vp.thetas
    )
    if kind == "hdp":
        nu = np.asarray(vp.nu_hat, dtype=float)
        if np.any(nu <= 0) or np.any(nu >= 1):
            raise ValueError("nu_hat entries must lie strictly inside (0, 1)")
        g = hyper.gamma
        nu_term = float(np.sum(math.log(g) + (g - 1.0) * np.log1p(-nu)))
        return nu_term + theta_term
    if kind == "dirichlet":
        K = hyper.K
        row_term = 0.0
        for j in range(K + 1):
            row = _expected_row(vp, j)
            conc = np.full(K, hyper.alpha / K)
            if j >= 1:
                conc[j - 1] += hyper.kappa
            log_norm = float(np.sum([math.lgamma(c) for c in conc])) - math.lgamma(
                float(conc.sum())
            )
            row = np.clip(row, 1e-300, None)
            row_term += float(np.sum((conc - 1.0) * np.log(row))) - log_norm
        return row_term + theta_term
    raise ValueError(f"unknown prior kind {kind!r}")


def _expected_row(vp, j: int) -> np.ndarray:
    """Mean chain row j under the factorized Beta sticks (exact: the mean
    of a product of independent factors is the product of their means)."""
    a = np.asarray(vp.mu_hat[j], dtype=float)
    b = np.asarray(vp.mu_hat_row[j], dtype=float) - np.cumsum(a)
    mean_sticks = a / (a + b) if a.size else np.zeros(0)
    return rows_from_mu(np.append(mean_sticks, 1.0))
