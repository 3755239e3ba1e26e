"""Belief-aware CEM model-predictive control and agent evaluation.

The planner refines a Gaussian distribution over action-plan updates.
Each candidate plan is scored by Monte-Carlo model rollouts: every trace
draws an initial context from the supplied belief, then lets the context
evolve through the transition chain while the state evolves through that
context's dynamics network.  Context draws use Gumbel-argmax over log
probabilities so that a joint relabeling of (chain, networks, belief)
leaves sampled trajectories unchanged under a consistently permuted
noise stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .belief import Belief, belief_step, initial_belief
from .chain import ContextChain
from .dynamics import ContextParams, predict

_SIGMA_FLOOR = 1e-8
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class CemConfig:
    horizon: int = 10
    n_pops: int = 40
    n_elite: int = 4
    n_traces: int = 3
    n_iters: int = 4
    lr: float = 0.7
    init_std: float = 0.6
    discount: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (1 <= self.n_elite <= self.n_pops):
            raise ValueError("need 1 <= n_elite <= n_pops")
        if not (0.0 < self.lr <= 1.0):
            raise ValueError("lr must be in (0, 1]")
        if not (0.0 <= self.discount <= 1.0):
            raise ValueError("discount must be in [0, 1]")
        if self.init_std <= 0 or self.n_traces < 1 or self.n_iters < 1:
            raise ValueError("init_std > 0, n_traces >= 1, n_iters >= 1 required")


@dataclass
class Plan:
    actions: np.ndarray   # (H, dA) base plan
    mu: np.ndarray        # (H, dA) update means
    sigma: np.ndarray     # (H, dA) update stds, > 0

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if not (self.actions.shape == self.mu.shape == self.sigma.shape):
            raise ValueError("actions, mu, sigma must share one (H, dA) shape")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive elementwise")


def initial_plan(cfg: CemConfig, action_dim: int) -> Plan:
    shape = (cfg.horizon, action_dim)
    return Plan(np.zeros(shape), np.zeros(shape), np.full(shape, cfg.init_std))


@dataclass
class PlannerModel:
    """Everything the planner needs: the context chain, one dynamics
    network per context, the known reward, and the actuator limit."""

    chain: ContextChain
    thetas: list[ContextParams]
    reward_fn: object            # callable (S (n,D), A (n,dA)) -> (n,)
    action_limit: float | None = None

    def __post_init__(self):
        if len(self.thetas) != self.chain.n_contexts:
            raise ValueError("one dynamics network per context required")


def _gumbel_argmax(
    logits: np.ndarray, noise: np.ndarray
) -> np.ndarray:
    return np.argmax(logits + noise, axis=-1)


def _score_candidates(
    model: PlannerModel,
    s: np.ndarray,
    b: Belief,
    cand_actions: np.ndarray,
    cfg: CemConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    P, H, dA = cand_actions.shape
    K = model.chain.n_contexts
    n = P * cfg.n_traces
    D = s.size

    S = np.broadcast_to(s, (n, D)).copy()
    log_b = np.log(np.maximum(b.probs, _LOG_FLOOR))
    log_R = np.log(np.maximum(model.chain.R, _LOG_FLOOR))
    gumbels = rng.gumbel(size=(H, n, K))
    state_noise = rng.standard_normal((H, n, D))

    z = _gumbel_argmax(log_b[None, :], gumbels[0])
    total = np.zeros(n)
    disc = 1.0
    for k in range(H):
        A_k = np.repeat(cand_actions[:, k, :], cfg.n_traces, axis=0)
        if model.action_limit is not None:
            A_k = np.clip(A_k, -model.action_limit, model.action_limit)
        S_next = np.empty_like(S)
        for c in range(K):
            mask = z == c
            if not mask.any():
                continue
            pred = predict(model.thetas[c], S[mask], A_k[mask])
            S_next[mask] = pred.mean + state_noise[k][mask] * pred.std
        S = S_next
        total += disc * model.reward_fn(S, A_k)
        disc *= cfg.discount
        if k + 1 < H:
            z = _gumbel_argmax(log_R[z], gumbels[k + 1])
    if not np.all(np.isfinite(total)):
        raise FloatingPointError("model rollout produced non-finite returns")
    return total.reshape(P, cfg.n_traces).mean(axis=1)


def cem_plan(
    model: PlannerModel,
    s: np.ndarray,
    b: Belief,
    plan: Plan,
    cfg: CemConfig,
    rng: np.random.Generator,
    record: list | None = None,
) -> Plan:
    """Refine the plan-update distribution by iterated elite selection."""
    if b.probs.size != model.chain.n_contexts:
        raise ValueError("belief dimension does not match the chain")
    mu = plan.mu.copy()
    sigma = plan.sigma.copy()
    H, dA = plan.actions.shape
    for it in range(cfg.n_iters):
        deltas = mu[None] + sigma[None] * rng.standard_normal((cfg.n_pops, H, dA))
        scores = _score_candidates(
            model, s, b, plan.actions[None] + deltas, cfg, rng
        )
        # stable sort on the negated scores breaks ties by candidate index
        elite_idx = np.argsort(-scores, kind="stable")[: cfg.n_elite]
        elite = deltas[elite_idx]
        mu = (1.0 - cfg.lr) * mu + cfg.lr * elite.mean(axis=0)
        var = (1.0 - cfg.lr) * sigma**2 + cfg.lr * elite.var(axis=0)
        sigma = np.sqrt(np.maximum(var, _SIGMA_FLOOR**2))
        if record is not None:
            record.append(
                {
                    "iteration": it,
                    "elite_median": float(np.median(scores[elite_idx])),
                    "best": float(scores[elite_idx[0]]),
                }
            )
    return Plan(plan.actions.copy(), mu, sigma)


@dataclass
class MpcState:
    """Receding-horizon planner state carried across environment steps."""

    model: PlannerModel
    cfg: CemConfig
    plan: Plan = field(init=False)

    def __post_init__(self):
        self.plan = initial_plan(self.cfg, self._action_dim())

    def _action_dim(self) -> int:
        spec = self.model.thetas[0].spec
        return spec.in_dim - spec.out_dim

    def reset(self):
        self.plan = initial_plan(self.cfg, self._action_dim())

    def pop_action(self) -> np.ndarray:
        """Consume the head of the cached plan without replanning."""
        a = self.plan.actions[0] + self.plan.mu[0]
        dA = a.size
        self.plan = Plan(
            np.vstack([self.plan.actions[1:], np.zeros((1, dA))]),
            np.vstack([self.plan.mu[1:], np.zeros((1, dA))]),
            np.vstack([self.plan.sigma[1:], np.full((1, dA), self.cfg.init_std)]),
        )
        return a.copy()


def mpc_act(
    state: MpcState, s: np.ndarray, b: Belief, rng: np.random.Generator
) -> np.ndarray:
    """Plan, execute the first refined action, shift the plan one step
    and append a zero tail for the next call."""
    refined = cem_plan(state.model, s, b, state.plan, state.cfg, rng)
    improved = refined.actions + refined.mu
    action = improved[0].copy()
    if state.model.action_limit is not None:
        action = np.clip(action, -state.model.action_limit, state.model.action_limit)
    H, dA = improved.shape
    shifted = np.vstack([improved[1:], np.zeros((1, dA))])
    state.plan = Plan(
        shifted, np.zeros((H, dA)), np.full((H, dA), state.cfg.init_std)
    )
    return action


class RandomAgent:
    """Uniform actions within the actuator limit."""

    wants_context = False

    def __init__(self, action_dim: int, action_limit: float):
        self.action_dim = action_dim
        self.action_limit = action_limit

    def begin_episode(self, s0):
        pass

    def act(self, s, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.action_limit, self.action_limit, size=self.action_dim)

    def observe(self, s, a, s_next):
        pass


class BeliefMpcAgent:
    """Plans against a filtered belief over the context that will govern
    the imminent transition: the chain's initial distribution before any
    transition is seen, the one-step-predicted posterior afterwards."""

    wants_context = False

    def __init__(self, model: PlannerModel, cfg: CemConfig, replan_every: int = 1):
        if replan_every < 1:
            raise ValueError("replan_every must be >= 1")
        self.model = model
        self.cfg = cfg
        self.replan_every = replan_every
        self.planner = MpcState(model, cfg)
        self._filtered: Belief | None = None
        self._steps = 0
        self.decoded_trace: list[int] = []

    def begin_episode(self, s0):
        self.planner.reset()
        self._filtered = None
        self._steps = 0
        self.decoded_trace = []

    def _planning_belief(self) -> Belief:
        if self._filtered is None:
            return Belief(self.model.chain.rho0.copy())
        probs = self._filtered.probs @ self.model.chain.R
        return Belief(probs / probs.sum())

    def act(self, s, rng: np.random.Generator) -> np.ndarray:
        b = self._planning_belief()
        self.decoded_trace.append(int(np.argmax(b.probs)))
        replan = self._steps % self.replan_every == 0
        self._steps += 1
        if replan:
            return mpc_act(self.planner, s, b, rng)
        return self.planner.pop_action()

    def observe(self, s, a, s_next):
        if self._filtered is None:
            self._filtered = initial_belief(
                s, a, s_next, self.model.chain, self.model.thetas
            )
        else:
            self._filtered = belief_step(
                self._filtered, s, a, s_next, self.model.chain, self.model.thetas
            )


class OracleMpcAgent:
    """Same planner, but the belief is a one-hot on the true context
    announced by the environment each step."""

    wants_context = True

    def __init__(self, model: PlannerModel, cfg: CemConfig, replan_every: int = 1):
        if replan_every < 1:
            raise ValueError("replan_every must be >= 1")
        self.model = model
        self.cfg = cfg
        self.replan_every = replan_every
        self.planner = MpcState(model, cfg)
        self._z: int | None = None
        self._steps = 0
        self.decoded_trace: list[int] = []

    def begin_episode(self, s0):
        self.planner.reset()
        self._z = None
        self._steps = 0
        self.decoded_trace = []

    def observe_context(self, z: int):
        self._z = int(z)

    def act(self, s, rng: np.random.Generator) -> np.ndarray:
        if self._z is None:
            raise RuntimeError("oracle agent did not receive the true context")
        probs = np.zeros(self.model.chain.n_contexts)
        probs[self._z] = 1.0
        self.decoded_trace.append(self._z)
        replan = self._steps % self.replan_every == 0
        self._steps += 1
        if replan:
            return mpc_act(self.planner, s, Belief(probs), rng)
        return self.planner.pop_action()

    def observe(self, s, a, s_next):
        pass


@dataclass
class EvalResult:
    agent: str
    env_name: str
    returns: np.ndarray
    misidentified: np.ndarray | None
    seed: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))

    def to_records(self) -> list[dict]:
        out = []
        for ep, ret in enumerate(self.returns):
            rec = {
                "agent": self.agent,
                "env": self.env_name,
                "episode": ep,
                "return": float(ret),
                "seed": self.seed,
            }
            if self.misidentified is not None:
                rec["misidentified_switches"] = int(self.misidentified[ep])
            out.append(rec)
        return out


def _episode_rngs(seed: int, episode: int):
    ss = np.random.SeedSequence(entropy=(int(seed), int(episode)))
    env_ss, agent_ss = ss.spawn(2)
    return np.random.Generator(np.random.Philox(env_ss)), np.random.Generator(
        np.random.Philox(agent_ss)
    )


def evaluate(
    agent, env, episodes: int, seed: int, agent_name: str = "agent"
) -> EvalResult:
    """Run closed-loop episodes.  Environment randomness is a pure
    function of (seed, episode), so evaluating two agents with the same
    seed pairs their episodes: identical initial states and, for context
    processes that ignore the state, identical context paths.
    """
    from .envs import rollout  # local import to avoid a module cycle

    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    returns = np.empty(episodes)
    miss: list[int] | None = [] if hasattr(agent, "decoded_trace") else None
    for ep in range(episodes):
        env_rng, agent_rng = _episode_rngs(seed, ep)
        traj = rollout(env, agent, env_rng, agent_rng, seed_label=seed)
        returns[ep] = float(np.sum(traj.rewards))
        if miss is not None:
            decoded = np.asarray(agent.decoded_trace, dtype=int)
            miss.append(int(np.sum(decoded != traj.true_z)))
    return EvalResult(
        agent=agent_name,
        env_name=env.name,
        returns=returns,
        misidentified=None if miss is None else np.asarray(miss),
        seed=seed,
    )


def paired_bootstrap_halfwidth(
    returns_a: np.ndarray,
    returns_b: np.ndarray,
    rng: np.random.Generator,
    n_boot: int = 2000,
    conf: float = 0.95,
) -> float:
    """Half-width of the bootstrap confidence interval for the mean of
    the paired differences a - b."""
    a = np.asarray(returns_a, dtype=float)
    bb = np.asarray(returns_b, dtype=float)
    if a.shape != bb.shape:
        raise ValueError("paired comparison needs equal-length return lists")
    diffs = a - bb
    n = diffs.size
    idx = rng.integers(0, n, size=(n_boot, n))
    means = diffs[idx].mean(axis=1)
    lo = (1.0 - conf) / 2.0
    q_lo, q_hi = np.quantile(means, [lo, 1.0 - lo])
    return float((q_hi - q_lo) / 2.0)


def make_agent(
    kind: str,
    env,
    model: PlannerModel | None = None,
    cfg: CemConfig | None = None,
):
    if kind == "random":
        return RandomAgent(env.action_dim, env.action_limit)
    if cfg is None:
        cfg = CemConfig()
    if kind == "oracle_mpc":
        if model is None:
            model = true_model(env)
        return OracleMpcAgent(model, cfg)
    if kind == "belief_mpc":
        if model is None:
            raise ValueError("belief_mpc requires a model")
        return BeliefMpcAgent(model, cfg)
    raise ValueError(f"unknown agent kind {kind!r}")


def true_model(env) -> PlannerModel:
    """Planner model from an environment that exposes its exact dynamics."""
    if not hasattr(env, "true_dynamics_params"):
        raise ValueError(f"{env.name} does not expose exact dynamics")
    return PlannerModel(
        chain=env.process.chain,
        thetas=env.true_dynamics_params(),
        reward_fn=env.reward_batch,
        action_limit=env.action_limit,
    )
