"""Trajectory records and their line-delimited JSON wire format.

One line per episode: {"episode_id": ..., "config": ..., "steps": [...]},
each step being {"t", "state" (16 floats), "action", "reward", "rtg"}.
Field names and order are fixed; floats are serialized with Python's
shortest round-trip repr, so read(write(x)) == x bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np


def compute_rtg(rewards) -> np.ndarray:
    """Undiscounted return-to-go: rtg[t] = sum of rewards from t to the end.

    Built backwards so the telescoping identity
    rtg[t] == rtg[t+1] + rewards[t] holds exactly in floating point.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(rewards)):
        raise ValueError("rewards must be finite")
    rtg = np.zeros_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + acc
        rtg[t] = acc
    return rtg


@dataclass
class Trajectory:
    """One logged episode: per-step states, actions, rewards, returns-to-go."""

    episode_id: int
    config: "EpisodeConfig"
    states: np.ndarray   # [T, 16]
    actions: np.ndarray  # [T]
    rewards: np.ndarray  # [T]
    rtg: np.ndarray      # [T]

    @classmethod
    def from_rewards(cls, episode_id, config, states, actions, rewards) -> "Trajectory":
        return cls(episode_id, config, np.asarray(states, dtype=np.float64),
                   np.asarray(actions, dtype=np.float64),
                   np.asarray(rewards, dtype=np.float64),
                   compute_rtg(rewards))

    @property
    def num_steps(self) -> int:
        return self.actions.shape[0]

    def to_record(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "config": self.config.to_dict(),
            "steps": [
                {
                    "t": t,
                    "state": self.states[t].tolist(),
                    "action": float(self.actions[t]),
                    "reward": float(self.rewards[t]),
                    "rtg": float(self.rtg[t]),
                }
                for t in range(self.num_steps)
            ],
        }

    @classmethod
    def from_record(cls, record: dict) -> "Trajectory":
        from .auction import EpisodeConfig

        steps = record["steps"]
        return cls(
            episode_id=record["episode_id"],
            config=EpisodeConfig.from_dict(record["config"]),
            states=np.array([s["state"] for s in steps], dtype=np.float64),
            actions=np.array([s["action"] for s in steps], dtype=np.float64),
            rewards=np.array([s["reward"] for s in steps], dtype=np.float64),
            rtg=np.array([s["rtg"] for s in steps], dtype=np.float64),
        )


def write_trajectories(trajectories: Iterable[Trajectory], path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_record()))
            fh.write("\n")


def read_trajectories(path) -> list[Trajectory]:
    path = Path(path)
    out = []
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Trajectory.from_record(json.loads(line)))
    return out
