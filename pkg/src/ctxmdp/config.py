"""Flat key=value experiment configuration.

One key per line, `key = value`, `#` comments and blank lines ignored.
Unknown keys are rejected so typos fail loudly.  Values are parsed by
the declared type of each key; comma-separated lists for the few vector
valued keys (chi, hidden).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

KNOWN_PRIORS = ("hdp", "dirichlet", "mle")


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in str(text).split(",") if p.strip() != "")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in str(text).split(",") if p.strip() != "")


@dataclass
class ExperimentConfig:
    # environment
    env: str = "switching_linear"
    context_mode: str = "markov"
    cooloff: int = 5
    stay_prob: float = 0.9
    chi: tuple[float, ...] = (1.0, -1.0)
    env_horizon: int = 100
    # model family / prior
    k_trunc: int = 5
    prior: str = "hdp"
    gamma: float = 2.0
    alpha: float = 2.0
    kappa: float = 3.0
    theta_prior_std: float = 0.1
    hidden: tuple[int, ...] = (32,)
    log_std_init: float = math.log(0.1)
    # training
    n_mu_samples: int = 1
    batch_size: int = 50
    lr_theta: float = 5e-3
    lr_mu: float = 1e-2
    lr_nu: float = 1e-2
    clip_norm: float = 10.0
    model_epochs_warm: int = 40
    model_epochs: int = 10
    distill_every: int = 0          # 0 disables distillation during training
    epsilon_train: float = 0.01
    epsilon_test: float = 0.01
    # outer loop
    n_warm: int = 20
    n_traj: int = 1
    n_epochs: int = 2
    eval_episodes: int = 5
    replan_every: int = 1
    # planner
    cem_horizon: int = 10
    cem_pops: int = 40
    cem_elite: int = 4
    cem_traces: int = 3
    cem_iters: int = 4
    cem_lr: float = 0.7
    cem_init_std: float = 0.6
    cem_discount: float = 1.0
    # bookkeeping
    seed: int = 0
    out: str = "runs/exp"
    dataset: str = ""
    model: str = ""

    def __post_init__(self):
        if self.prior not in KNOWN_PRIORS:
            raise ConfigError(f"prior must be one of {KNOWN_PRIORS}")
        if self.n_warm < 1:
            raise ConfigError("n_warm must be >= 1")
        if self.n_traj < 0 or self.n_epochs < 1:
            raise ConfigError("n_traj >= 0 and n_epochs >= 1 required")
        if self.k_trunc < 1:
            raise ConfigError("k_trunc must be >= 1")
        if self.replan_every < 1:
            raise ConfigError("replan_every must be >= 1")


_PARSERS = {
    "chi": _floats,
    "hidden": _ints,
}


def parse_config_text(text: str) -> dict:
    """Parse the flat format into a raw string dict, keyed by line."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    spec = {f.name: f.type for f in fields(ExperimentConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in spec:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _PARSERS:
            kwargs[key] = _PARSERS[key](value)
        else:
            default = getattr(ExperimentConfig, key, None)
            if isinstance(default, bool):
                kwargs[key] = str(value).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = str(value)
    return ExperimentConfig(**kwargs)


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(parse_config_text(fh.read()))


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
