"""Per-context Gaussian dynamics models.

Each context k owns a small ReLU network f_k and a per-dimension log
standard deviation; the next state is N(s + f_k(s, a), diag exp(log_std)^2).
Gradients are reverse-mode by hand so the package stays numpy-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NetworkSpec:
    """Layer sizes include input and output, e.g. (6, 128, 4)."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"need >= 2 positive layer sizes, got {sizes}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        weights = sum(
            o * i + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )
        return weights + self.out_dim  # + log_std


@dataclass
class ContextParams:
    """Weights (list of (W, b) per layer) and log_std for one context."""

    spec: NetworkSpec
    weights: list[tuple[np.ndarray, np.ndarray]]
    log_std: np.ndarray

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.weights) != len(sizes) - 1:
            raise ValueError("wrong number of layers")
        for li, (W, b) in enumerate(self.weights):
            if W.shape != (sizes[li + 1], sizes[li]) or b.shape != (sizes[li + 1],):
                raise ValueError(f"layer {li} has shapes W{W.shape} b{b.shape}")
        if self.log_std.shape != (self.spec.out_dim,):
            raise ValueError("log_std must match the output dimension")

    def flatten(self) -> np.ndarray:
        parts = []
        for W, b in self.weights:
            parts.append(W.ravel())
            parts.append(b)
        parts.append(self.log_std)
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, spec: NetworkSpec, vec: np.ndarray) -> "ContextParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (spec.n_params,):
            raise ValueError(
                f"expected {spec.n_params} parameters, got {vec.shape}"
            )
        sizes = spec.layer_sizes
        weights = []
        pos = 0
        for i, o in zip(sizes[:-1], sizes[1:]):
            W = vec[pos : pos + o * i].reshape(o, i)
            pos += o * i
            b = vec[pos : pos + o]
            pos += o
            weights.append((W.copy(), b.copy()))
        log_std = vec[pos:].copy()
        return cls(spec=spec, weights=weights, log_std=log_std)


def init_params(
    spec: NetworkSpec,
    rng: np.random.Generator,
    weight_std: float = 0.1,
    log_std_init: float = math.log(0.1),
) -> ContextParams:
    """Weights ~ N(0, weight_std^2), biases 0, constant log_std."""
    sizes = spec.layer_sizes
    weights = [
        (weight_std * rng.standard_normal((o, i)), np.zeros(o))
        for i, o in zip(sizes[:-1], sizes[1:])
    ]
    return ContextParams(
        spec=spec,
        weights=weights,
        log_std=np.full(spec.out_dim, log_std_init),
    )


@dataclass(frozen=True)
class GaussianPrediction:
    mean: np.ndarray
    std: np.ndarray

    def sample(self, eps: np.ndarray) -> np.ndarray:
        """mean + std * eps for an externally supplied standard normal."""
        return self.mean + self.std * eps


def forward_batch(theta: ContextParams, X: np.ndarray) -> tuple[np.ndarray, list]:
    """Network output for a batch of inputs X (n, in_dim); returns the
    output (n, out_dim) and the cached layer activations for backprop."""
    h = X
    cache = [X]
    n_layers = len(theta.weights)
    for li, (W, b) in enumerate(theta.weights):
        z = h @ W.T + b
        if li < n_layers - 1:
            h = np.maximum(z, 0.0)
        else:
            h = z
        cache.append(h)
    return h, cache


def predict(theta: ContextParams, s: np.ndarray, a: np.ndarray) -> GaussianPrediction:
    """Gaussian next-state distribution N(s + f(s, a), diag std^2).

    Accepts a single (D,)/(dA,) pair or stacked (n, D)/(n, dA) batches."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    single = s.ndim == 1
    S = s[None, :] if single else s
    A = a[None, :] if single else a
    out, _ = forward_batch(theta, np.concatenate([S, A], axis=1))
    mean = S + out
    return GaussianPrediction(
        mean=mean[0] if single else mean, std=np.exp(theta.log_std)
    )


def backprop_batch(
    theta: ContextParams,
    cache: list,
    dout: np.ndarray,
) -> np.ndarray:
    """Gradient of sum(dout * output) w.r.t. the flattened network weights
    (log_std excluded; caller appends its own block)."""
    grads: list[np.ndarray | None] = [None] * len(theta.weights)
    delta = dout
    for li in range(len(theta.weights) - 1, -1, -1):
        W, _ = theta.weights[li]
        h_in = cache[li]
        gW = delta.T @ h_in
        gb = delta.sum(axis=0)
        grads[li] = np.concatenate([gW.ravel(), gb])
        if li > 0:
            delta = (delta @ W) * (cache[li] > 0.0)
    return np.concatenate(grads)  # type: ignore[arg-type]


def loglik_batch(
    theta: ContextParams,
    states: np.ndarray,
    actions: np.ndarray,
    next_states: np.ndarray,
) -> tuple[np.ndarray, tuple]:
    """Per-transition Gaussian log likelihoods for one context.

    Returns (loglik (n,), cache) where the cache feeds weighted_grad.
    """
    X = np.concatenate([states, actions], axis=1)
    out, cache = forward_batch(theta, X)
    mean = states + out
    std = np.exp(theta.log_std)
    resid = next_states - mean
    z = resid / std
    ll = -0.5 * np.sum(z * z, axis=1) - np.sum(theta.log_std) - 0.5 * out.shape[1] * _LOG_2PI
    return ll, (cache, resid, std)


def weighted_grad(
    theta: ContextParams,
    cache_pack: tuple,
    weights: np.ndarray,
) -> np.ndarray:
    """Gradient of sum_t weights_t * loglik_t w.r.t. the flat parameters."""
    cache, resid, std = cache_pack
    w = weights[:, None]
    dmean = w * resid / (std * std)
    g_net = backprop_batch(theta, cache, dmean)
    z2 = (resid / std) ** 2
    g_log_std = np.sum(weights[:, None] * (z2 - 1.0), axis=0)
    return np.concatenate([g_net, g_log_std])


def log_likelihood_and_grad(
    theta: ContextParams,
    s: np.ndarray,
    a: np.ndarray,
    s_next: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Log density of one transition and its gradient w.r.t. the
    flattened parameters (weights then log_std)."""
    ll, pack = loglik_batch(
        theta, np.atleast_1d(s)[None, :], np.atleast_1d(a)[None, :],
        np.atleast_1d(s_next)[None, :],
    )
    grad = weighted_grad(theta, pack, np.ones(1))
    return float(ll[0]), grad


def linear_params(M: np.ndarray, log_std: np.ndarray) -> ContextParams:
    """Exact linear map x -> M x as a ReLU network, via the positive/negative
    split trick: relu(x) - relu(-x) = x.  M has shape (out, in)."""
    out_dim, in_dim = M.shape
    spec = NetworkSpec(layer_sizes=(in_dim, 2 * in_dim, out_dim))
    W1 = np.vstack([np.eye(in_dim), -np.eye(in_dim)])
    b1 = np.zeros(2 * in_dim)
    W2 = np.hstack([M, -M])
    b2 = np.zeros(out_dim)
    return ContextParams(
        spec=spec,
        weights=[(W1, b1), (W2, b2)],
        log_std=np.asarray(log_std, dtype=float),
    )


def save_params(thetas: list[ContextParams]) -> tuple[dict, np.ndarray]:
    """Serializable header and a single flat double array for a list of
    per-context parameters (shared spec)."""
    spec = thetas[0].spec
    header = {
        "layer_sizes": list(spec.layer_sizes),
        "activation": spec.activation,
        "n_contexts": len(thetas),
        "n_params": spec.n_params,
    }
    flat = np.concatenate([t.flatten() for t in thetas])
    return header, flat


def load_params(header: dict, flat: np.ndarray) -> list[ContextParams]:
    spec = NetworkSpec(
        layer_sizes=tuple(header["layer_sizes"]),
        activation=header.get("activation", "relu"),
    )
    n = header["n_contexts"]
    P = spec.n_params
    if flat.shape != (n * P,):
        raise ValueError(f"expected {n * P} doubles, got {flat.shape}")
    return [ContextParams.unflatten(spec, flat[k * P : (k + 1) * P]) for k in range(n)]
