"""Learning and controlling MDPs whose dynamics switch with a hidden
Markovian context: variational fitting of a switching dynamics model
under a sticky stick-breaking prior, pruning of spurious contexts,
recursive context-belief filtering, and belief-aware CEM planning."""

from .belief import (
    Belief,
    BeliefUnderflowError,
    belief_step,
    decode_accuracy,
    decode_contexts,
    filter_trajectory,
    initial_belief,
)
from .chain import (
    ContextChain,
    DistillResult,
    StationaryError,
    distill,
    load_chain_csv,
    save_chain_csv,
    stationary_distribution,
)
from .config import ConfigError, ExperimentConfig, load_config
from .control import (
    BeliefMpcAgent,
    CemConfig,
    EvalResult,
    MpcState,
    OracleMpcAgent,
    Plan,
    PlannerModel,
    RandomAgent,
    cem_plan,
    evaluate,
    initial_plan,
    mpc_act,
    paired_bootstrap_halfwidth,
    true_model,
)
from .dynamics import ContextParams, GaussianPrediction, NetworkSpec, init_params, predict
from .envs import (
    CartpoleSwingupEnv,
    ContextProcess,
    EnvState,
    SwitchingLinearEnv,
    context_step,
    env_step,
    make_cartpole,
    make_env,
    make_switching_linear,
    rollout,
)
from .inference import (
    EvidenceUnderflowError,
    MessageTable,
    TrainConfig,
    VariationalParams,
    elbo_estimate,
    elbo_gradients,
    extract_chain,
    fit,
    likelihood_grads,
    load_checkpoint,
    message_pass,
    save_checkpoint,
)
from .prior import BetaParams, HdpHyper, StickWeights, gem_weights, kl_beta
from .trajectory import Trajectory, load_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "Belief",
    "BeliefMpcAgent",
    "BeliefUnderflowError",
    "BetaParams",
    "CartpoleSwingupEnv",
    "CemConfig",
    "ConfigError",
    "ContextChain",
    "ContextParams",
    "ContextProcess",
    "DistillResult",
    "EnvState",
    "EvalResult",
    "EvidenceUnderflowError",
    "ExperimentConfig",
    "GaussianPrediction",
    "HdpHyper",
    "MessageTable",
    "MpcState",
    "NetworkSpec",
    "OracleMpcAgent",
    "Plan",
    "PlannerModel",
    "RandomAgent",
    "StationaryError",
    "StickWeights",
    "SwitchingLinearEnv",
    "TrainConfig",
    "Trajectory",
    "VariationalParams",
    "belief_step",
    "cem_plan",
    "context_step",
    "decode_accuracy",
    "decode_contexts",
    "distill",
    "elbo_estimate",
    "elbo_gradients",
    "env_step",
    "evaluate",
    "extract_chain",
    "filter_trajectory",
    "fit",
    "gem_weights",
    "init_params",
    "initial_belief",
    "initial_plan",
    "kl_beta",
    "likelihood_grads",
    "load_chain_csv",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "make_cartpole",
    "make_env",
    "make_switching_linear",
    "message_pass",
    "mpc_act",
    "paired_bootstrap_halfwidth",
    "predict",
    "rollout",
    "save_chain_csv",
    "save_checkpoint",
    "save_dataset",
    "stationary_distribution",
    "true_model",
]
