"""Simulated environments whose dynamics switch with a hidden context.

The context follows a Markov chain with a cool-off (a fresh switch holds
for `cooloff` steps before the next draw is allowed), or one of two
stress variants: a lag-2 rule that draws the next context from the row of
the previous step's context, and a state-dependent rule that bands the
first state coordinate.  Dynamics are applied with the pre-step context,
then the context advances; true_z[t] is therefore the context that
generated transition t, and the first transition's context is the reset
draw from rho0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .chain import ContextChain
from .dynamics import ContextParams, linear_params
from .trajectory import Trajectory

CONTEXT_MODES = ("markov", "non_markov_lag2", "state_dependent")
_BAND_WIDTH = 0.1


@dataclass(frozen=True)
class ContextProcess:
    chain: ContextChain
    cooloff: int = 0
    mode: str = "markov"

    def __post_init__(self):
        if self.cooloff < 0:
            raise ValueError("cooloff must be >= 0")
        if self.mode not in CONTEXT_MODES:
            raise ValueError(f"mode must be one of {CONTEXT_MODES}")


@dataclass(frozen=True)
class EnvState:
    s: np.ndarray
    z: int
    prev_z: int
    steps_since_switch: int
    t: int


def _sample_index(rng: np.random.Generator, probs: np.ndarray) -> int:
    u = rng.random()
    return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, probs.size - 1))


def _band_context(pos: float) -> int:
    m = int(math.floor(abs(pos) / _BAND_WIDTH))
    return m % 2 if pos >= 0 else (m + 1) % 2


def context_step(
    process: ContextProcess, state: EnvState, rng: np.random.Generator
) -> EnvState:
    """Advance the hidden context by one step, honoring the cool-off.

    The steps_since_switch counter counts completed steps since the last
    actual change; a self-transition draw does not reset it.
    """
    z = state.z
    if state.steps_since_switch >= process.cooloff:
        if process.mode == "markov":
            nz = _sample_index(rng, process.chain.R[z])
        elif process.mode == "non_markov_lag2":
            nz = _sample_index(rng, process.chain.R[state.prev_z])
        else:
            nz = _band_context(float(state.s[0]))
    else:
        nz = z
    sss = 0 if nz != z else state.steps_since_switch + 1
    return replace(state, z=nz, prev_z=z, steps_since_switch=sss)


@dataclass
class SwitchingLinearEnv:
    """Two-dimensional rotation-plus-decay system with context-dependent
    rotation direction and action sign.  Reward is a clipped quadratic
    bowl around the origin, in [0, 1]."""

    process: ContextProcess
    A: np.ndarray            # (K, D, D)
    B: np.ndarray            # (K, D, dA)
    chi: np.ndarray          # (K,) action multipliers
    noise_std: float = 0.05
    action_limit: float = 2.0
    horizon: int = 100
    init_std: float = 0.6
    name: str = "switching_linear"

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def action_dim(self) -> int:
        return self.B.shape[2]

    @property
    def n_contexts(self) -> int:
        return self.chi.size

    def reset(self, rng: np.random.Generator) -> EnvState:
        s0 = self.init_std * rng.standard_normal(self.state_dim)
        if self.process.mode == "state_dependent":
            z0 = _band_context(float(s0[0]))
        else:
            z0 = _sample_index(rng, self.process.chain.rho0)
        return EnvState(
            s=s0, z=z0, prev_z=z0, steps_since_switch=self.process.cooloff, t=0
        )

    def dynamics(
        self, s: np.ndarray, a: np.ndarray, z: int, rng: np.random.Generator
    ) -> np.ndarray:
        a = np.clip(a, -self.action_limit, self.action_limit)
        drive = self.B[z] @ (self.chi[z] * a)
        noise = self.noise_std * rng.standard_normal(self.state_dim)
        return self.A[z] @ s + drive + noise

    def reward(self, s_next: np.ndarray, a: np.ndarray) -> float:
        return float(
            max(0.0, 1.0 - np.sum(s_next**2) - 0.01 * np.sum(np.asarray(a) ** 2))
        )

    def reward_batch(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        return np.maximum(
            0.0, 1.0 - np.sum(S**2, axis=-1) - 0.01 * np.sum(A**2, axis=-1)
        )

    def true_dynamics_params(self) -> list[ContextParams]:
        """The exact dynamics as per-context linear networks, for planners
        granted the true model."""
        out = []
        # noise-free envs still need a finite log_std for the planner
        log_std = np.full(self.state_dim, math.log(max(self.noise_std, 1e-12)))
        eye = np.eye(self.state_dim)
        for k in range(self.n_contexts):
            M = np.hstack([self.A[k] - eye, self.chi[k] * self.B[k]])
            out.append(linear_params(M, log_std))
        return out


def make_switching_linear(
    cooloff: int = 5,
    mode: str = "markov",
    stay_prob: float = 0.9,
    angles: tuple[float, ...] = (0.35, -0.35),
    decay: float = 0.98,
    chi: tuple[float, ...] = (1.0, -1.0),
    noise_std: float = 0.05,
    horizon: int = 100,
) -> SwitchingLinearEnv:
    K = len(chi)
    if len(angles) != K:
        raise ValueError("need one rotation angle per context")
    R = np.full((K, K), (1.0 - stay_prob) / max(K - 1, 1))
    np.fill_diagonal(R, stay_prob if K > 1 else 1.0)
    chain = ContextChain(np.full(K, 1.0 / K), R)
    A = np.stack(
        [
            decay
            * np.array(
                [[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]
            )
            for t in angles
        ]
    )
    B = np.tile(np.array([[0.15], [0.25]]), (K, 1, 1))
    return SwitchingLinearEnv(
        process=ContextProcess(chain=chain, cooloff=cooloff, mode=mode),
        A=A,
        B=B,
        chi=np.asarray(chi, dtype=float),
        noise_std=noise_std,
        horizon=horizon,
    )


@dataclass
class CartpoleSwingupEnv:
    """Cart-pole swing-up: the pole starts hanging and the reward is the
    cosine of its angle from upright.  The context multiplies the applied
    force (chi = -1 flips the actuator).

    Physics: cart mass M, pole mass m, pivot-to-center distance l (uniform
    rod), gravity g, cart friction fr.  Integration is semi-implicit Euler
    with `substeps` internal steps per control interval dt.
    """

    process: ContextProcess
    chi: np.ndarray
    masscart: float = 0.5
    masspole: float = 0.5
    length: float = 0.6
    gravity: float = 9.82
    friction: float = 0.1
    dt: float = 0.04
    substeps: int = 4
    force_limit: float = 20.0
    noise_std: float = 0.0
    horizon: int = 100
    name: str = "cartpole_swingup"

    state_dim: int = field(default=4, init=False)
    action_dim: int = field(default=1, init=False)

    @property
    def action_limit(self) -> float:
        return self.force_limit

    @property
    def n_contexts(self) -> int:
        return self.chi.size

    def reset(self, rng: np.random.Generator) -> EnvState:
        s0 = np.array(
            [0.0, 0.0, math.pi + 0.01 * rng.standard_normal(), 0.01 * rng.standard_normal()]
        )
        if self.process.mode == "state_dependent":
            z0 = _band_context(float(s0[0]))
        else:
            z0 = _sample_index(rng, self.process.chain.rho0)
        return EnvState(
            s=s0, z=z0, prev_z=z0, steps_since_switch=self.process.cooloff, t=0
        )

    def _accelerations(
        self, x_dot: float, theta: float, theta_dot: float, force: float
    ) -> tuple[float, float]:
        M, m, l, g = self.masscart, self.masspole, self.length, self.gravity
        sin_t, cos_t = math.sin(theta), math.cos(theta)
        G = force - self.friction * x_dot + m * l * theta_dot**2 * sin_t
        denom = M + m - 0.75 * m * cos_t**2
        x_acc = (G - 0.75 * m * g * sin_t * cos_t) / denom
        theta_acc = 3.0 * (g * sin_t - x_acc * cos_t) / (4.0 * l)
        return x_acc, theta_acc

    def dynamics(
        self, s: np.ndarray, a: np.ndarray, z: int, rng: np.random.Generator
    ) -> np.ndarray:
        force = self.chi[z] * float(
            np.clip(np.asarray(a).ravel()[0], -self.force_limit, self.force_limit)
        )
        x, x_dot, theta, theta_dot = (float(v) for v in s)
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            x_acc, theta_acc = self._accelerations(x_dot, theta, theta_dot, force)
            x_dot += x_acc * h
            x += x_dot * h
            theta_dot += theta_acc * h
            theta += theta_dot * h
        out = np.array([x, x_dot, theta, theta_dot])
        if self.noise_std > 0:
            out = out + self.noise_std * rng.standard_normal(4)
        else:
            rng.standard_normal(4)  # keep stream consumption uniform
        return out

    def energy(self, s: np.ndarray) -> float:
        """Total mechanical energy (zero potential at the pivot height)."""
        _, x_dot, theta, theta_dot = (float(v) for v in s)
        m, M, l, g = self.masspole, self.masscart, self.length, self.gravity
        ke = (
            0.5 * (M + m) * x_dot**2
            + m * l * x_dot * theta_dot * math.cos(theta)
            + (2.0 / 3.0) * m * l**2 * theta_dot**2
        )
        return ke + m * g * l * math.cos(theta)

    def reward(self, s_next: np.ndarray, a: np.ndarray) -> float:
        return float(math.cos(float(s_next[2])))

    def reward_batch(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        return np.cos(S[..., 2])


def make_cartpole(
    cooloff: int = 5,
    mode: str = "markov",
    stay_prob: float = 0.9,
    chi: tuple[float, ...] = (1.0, -1.0),
    horizon: int = 100,
) -> CartpoleSwingupEnv:
    K = len(chi)
    R = np.full((K, K), (1.0 - stay_prob) / max(K - 1, 1))
    np.fill_diagonal(R, stay_prob if K > 1 else 1.0)
    chain = ContextChain(np.full(K, 1.0 / K), R)
    return CartpoleSwingupEnv(
        process=ContextProcess(chain=chain, cooloff=cooloff, mode=mode),
        chi=np.asarray(chi, dtype=float),
        horizon=horizon,
    )


def make_env(name: str, **kwargs):
    if name == "switching_linear":
        return make_switching_linear(**kwargs)
    if name == "cartpole_swingup":
        return make_cartpole(**kwargs)
    raise ValueError(f"unknown environment {name!r}")


def env_step(env, state: EnvState, a: np.ndarray, rng: np.random.Generator):
    """Apply the dynamics with the current context, collect the reward,
    then advance the context.  Returns (next EnvState, reward)."""
    s_next = env.dynamics(state.s, np.atleast_1d(a), state.z, rng)
    if not np.all(np.isfinite(s_next)):
        raise FloatingPointError(f"non-finite state at t={state.t}")
    r = env.reward(s_next, np.atleast_1d(a))
    nxt = replace(state, s=s_next, t=state.t + 1)
    nxt = context_step(env.process, nxt, rng)
    return nxt, r


def rollout(
    env,
    agent,
    env_rng: np.random.Generator,
    agent_rng: np.random.Generator,
    horizon: int | None = None,
    seed_label: int | None = None,
) -> Trajectory:
    """One closed-loop episode.  The env and agent consume separate
    streams so paired evaluations can share environment randomness."""
    H = env.horizon if horizon is None else horizon
    state = env.reset(env_rng)
    agent.begin_episode(state.s)
    states = [state.s]
    actions, zs, rewards = [], [], []
    for _ in range(H):
        if getattr(agent, "wants_context", False):
            agent.observe_context(state.z)
        a = np.atleast_1d(agent.act(state.s, agent_rng))
        s_prev = state.s
        zs.append(state.z)
        state, r = env_step(env, state, a, env_rng)
        agent.observe(s_prev, a, state.s)
        states.append(state.s)
        actions.append(a)
        rewards.append(r)
    return Trajectory(
        states=np.stack(states),
        actions=np.stack(actions),
        true_z=np.asarray(zs, dtype=int),
        env_name=env.name,
        seed=seed_label,
        rewards=np.asarray(rewards),
    )
