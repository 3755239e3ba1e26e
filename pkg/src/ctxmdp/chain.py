"""Finite Markov context chains: validation, stationary distributions,
and reduction of a chain onto its high-occupancy contexts.

The reduction keeps the contexts whose long-run occupancy clears a
threshold and absorbs the rest through the stochastic complement
R11 + R12 (I - R22)^{-1} R21, which preserves the restricted stationary
distribution exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

_ATOL_ROWSUM = 1e-12
_STATIONARY_TOL = 1e-12
_STATIONARY_MAX_ITERS = 100_000
_RESIDUAL_ACCEPT = 1e-10


class StationaryError(RuntimeError):
    """Raised when no stationary distribution could be certified."""

    def __init__(self, residual: float):
        super().__init__(
            f"stationary distribution did not converge; last residual {residual:.3e}"
        )
        self.residual = residual


@dataclass(frozen=True)
class ContextChain:
    """Initial distribution rho0 (K,) and row-stochastic transitions R (K, K)."""

    rho0: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        rho0 = np.asarray(self.rho0, dtype=float)
        R = np.asarray(self.R, dtype=float)
        object.__setattr__(self, "rho0", rho0)
        object.__setattr__(self, "R", R)
        if rho0.ndim != 1 or R.ndim != 2 or R.shape != (rho0.size, rho0.size):
            raise ValueError(
                f"shape mismatch: rho0 {rho0.shape}, R {R.shape}"
            )
        if np.any(rho0 < 0) or np.any(rho0 > 1) or np.any(R < 0) or np.any(R > 1):
            raise ValueError("chain entries must lie in [0, 1]")
        if abs(rho0.sum() - 1.0) > _ATOL_ROWSUM:
            raise ValueError(f"rho0 sums to {rho0.sum()!r}, not 1")
        bad = np.abs(R.sum(axis=1) - 1.0) > _ATOL_ROWSUM
        if np.any(bad):
            j = int(np.argmax(bad))
            raise ValueError(f"row {j} of R sums to {R[j].sum()!r}, not 1")

    @property
    def n_contexts(self) -> int:
        return self.rho0.size


@dataclass(frozen=True)
class DistillResult:
    """Outcome of a distillation pass."""

    chain: ContextChain
    kept: tuple[int, ...]      # indices of surviving contexts, ascending
    removed: tuple[int, ...]   # indices of pruned contexts, ascending
    stationary: np.ndarray     # stationary distribution of the input chain
    mode: str = field(default="mpc")


def stationary_distribution(R: np.ndarray) -> np.ndarray:
    """Stationary row vector p with p = p R, entries >= 0 summing to 1.

    Power iteration to a residual of 1e-12 with a direct linear solve of
    (R^T - I) p = 0 as fallback for slowly mixing or periodic chains.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"R must be square, got {R.shape}")
    K = R.shape[0]
    if K == 1:
        return np.ones(1)
    p = np.full(K, 1.0 / K)
    residual = np.inf
    for _ in range(_STATIONARY_MAX_ITERS):
        nxt = p @ R
        s = nxt.sum()
        if s <= 0:
            break
        nxt = nxt / s
        residual = float(np.max(np.abs(nxt - p)))
        p = nxt
        if residual < _STATIONARY_TOL:
            return p
    # Fallback: solve (R^T - I) p = 0 with the normalization constraint
    # replacing one redundant equation.
    A = np.vstack([R.T - np.eye(K), np.ones((1, K))])
    b = np.zeros(K + 1)
    b[-1] = 1.0
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    sol = np.clip(sol, 0.0, None)
    total = sol.sum()
    if total > 0:
        sol = sol / total
        resid = float(np.max(np.abs(sol @ R - sol)))
        if resid < _RESIDUAL_ACCEPT:
            return sol
        residual = min(residual, resid)
    raise StationaryError(residual)


def distill(
    chain: ContextChain,
    epsilon: float,
    mode: str = "mpc",
    spuriosity: np.ndarray | None = None,
) -> DistillResult:
    """Prune contexts whose long-run occupancy falls below epsilon.

    mode="mpc" returns the reduced |kept| x |kept| chain built from the
    stochastic complement, with rho0 restricted and renormalized.
    mode="policy" keeps the full K x K shape: kept rows carry the reduced
    chain (zero columns into pruned contexts), pruned rows carry the escape
    distribution (I - R22)^{-1} R21 so a trajectory caught in a pruned
    context exits according to its long-run destination profile.

    spuriosity overrides the occupancy vector used for thresholding
    (defaults to the stationary distribution of R).
    """
    if not (0.0 <= epsilon < 1.0):
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if mode not in ("mpc", "policy"):
        raise ValueError(f"unknown mode {mode!r}")
    p_inf = stationary_distribution(chain.R)
    weights = p_inf if spuriosity is None else np.asarray(spuriosity, dtype=float)
    if weights.shape != (chain.n_contexts,):
        raise ValueError("spuriosity vector has wrong length")

    keep_mask = weights >= epsilon
    if not np.any(keep_mask):
        warnings.warn(
            "distill threshold removes every context; keeping the largest",
            RuntimeWarning,
        )
        keep_mask = np.zeros_like(keep_mask)
        keep_mask[int(np.argmax(weights))] = True
    kept = np.flatnonzero(keep_mask)
    removed = np.flatnonzero(~keep_mask)

    R = chain.R
    if removed.size == 0:
        reduced = R[np.ix_(kept, kept)]
        escape = np.zeros((0, kept.size))
    else:
        R11 = R[np.ix_(kept, kept)]
        R12 = R[np.ix_(kept, removed)]
        R21 = R[np.ix_(removed, kept)]
        R22 = R[np.ix_(removed, removed)]
        eye = np.eye(removed.size)
        # rows of (I - R22)^{-1} R21 sum to 1: the escape distribution.
        escape = np.linalg.solve(eye - R22, R21)
        reduced = R11 + R12 @ escape

    if mode == "mpc":
        rho0 = chain.rho0[kept]
        total = rho0.sum()
        if total <= 0:
            rho0 = np.full(kept.size, 1.0 / kept.size)
        else:
            rho0 = rho0 / total
        out = ContextChain(rho0, _renormalize_rows(reduced))
    else:
        full = np.zeros_like(R)
        full[np.ix_(kept, kept)] = reduced
        if removed.size:
            full[np.ix_(removed, kept)] = escape
        rho0 = np.where(keep_mask, chain.rho0, 0.0)
        total = rho0.sum()
        if total <= 0:
            rho0 = keep_mask.astype(float) / kept.size
        else:
            rho0 = rho0 / total
        out = ContextChain(rho0, _renormalize_rows(full))
    return DistillResult(
        chain=out,
        kept=tuple(int(k) for k in kept),
        removed=tuple(int(k) for k in removed),
        stationary=p_inf,
        mode=mode,
    )


def _renormalize_rows(R: np.ndarray) -> np.ndarray:
    """Scrub accumulated float error so row sums are exactly 1."""
    sums = R.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("cannot renormalize a row with nonpositive mass")
    return R / sums


def save_chain_csv(chain: ContextChain, path) -> None:
    """CSV with rho0 on the first row and the K rows of R after it,
    at 17 significant digits (lossless for doubles)."""
    rows = [chain.rho0] + [chain.R[j] for j in range(chain.n_contexts)]
    with open(path, "w") as fh:
        for row in rows:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def load_chain_csv(path) -> ContextChain:
    with open(path) as fh:
        rows = [
            [float(tok) for tok in line.strip().split(",")]
            for line in fh
            if line.strip()
        ]
    if not rows:
        raise ValueError(f"empty chain file {path}")
    arr = np.asarray(rows, dtype=float)
    if arr.shape[0] != arr.shape[1] + 1:
        raise ValueError(
            f"chain file {path} has shape {arr.shape}; expected K+1 rows of K"
        )
    return ContextChain(arr[0], arr[1:])
