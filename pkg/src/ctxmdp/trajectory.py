"""Trajectory container shared by the environments, the fitter, and the CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    """States (T+1, state_dim), actions (T, action_dim), and optionally the
    true context index per transition (T,)."""

    states: np.ndarray
    actions: np.ndarray
    true_z: np.ndarray | None = None
    env_name: str = ""
    seed: int | None = None
    rewards: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("states and actions must be 2-d arrays")
        if self.states.shape[0] != self.actions.shape[0] + 1:
            raise ValueError(
                f"need T+1 states for T actions, got {self.states.shape[0]} "
                f"states and {self.actions.shape[0]} actions"
            )
        if self.actions.shape[0] < 1:
            raise ValueError("trajectory must contain at least one transition")
        if self.true_z is not None:
            self.true_z = np.asarray(self.true_z, dtype=int)
            if self.true_z.shape != (self.actions.shape[0],):
                raise ValueError("true_z must have one entry per transition")
        if not np.all(np.isfinite(self.states)) or not np.all(np.isfinite(self.actions)):
            raise ValueError("non-finite values in trajectory")

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def to_record(self) -> dict:
        rec = {
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "true_z": None if self.true_z is None else self.true_z.tolist(),
            "env": self.env_name,
            "seed": self.seed,
        }
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        return cls(
            states=np.asarray(rec["states"], dtype=float),
            actions=np.asarray(rec["actions"], dtype=float),
            true_z=None if rec.get("true_z") is None else np.asarray(rec["true_z"]),
            env_name=rec.get("env", ""),
            seed=rec.get("seed"),
        )


def save_dataset(trajs: list[Trajectory], path) -> None:
    """One JSON record per line."""
    with open(path, "w") as fh:
        for traj in trajs:
            fh.write(json.dumps(traj.to_record()) + "\n")


def load_dataset(path) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Trajectory.from_record(json.loads(line)))
    return out
