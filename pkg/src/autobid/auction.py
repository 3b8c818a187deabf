"""Repeated second-price auction environment with budget and CPC constraints.

One episode is ``num_steps`` decision cycles. At each cycle the policy picks
a single bid coefficient; every impression in that cycle is bid at
coefficient * impression value. Wins pay the highest competing bid (second
price). The budget is a hard real-time gate: an impression whose charge
would push total spend past the budget is forfeited. The CPC cap never
blocks a bid; it only enters the state features, the value targets and the
evaluation penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .trajectories import Trajectory


class InvalidActionError(ValueError):
    """Policy emitted a non-finite or non-positive action."""


@dataclass
class DistributionSpec:
    """Named sampling distribution: beta, lognormal, uniform or constant."""

    name: str
    params: dict = field(default_factory=dict)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        p = self.params
        if self.name == "beta":
            return rng.beta(p["a"], p["b"], size=size)
        if self.name == "lognormal":
            return rng.lognormal(p["mean"], p["sigma"], size=size)
        if self.name == "uniform":
            return rng.uniform(p["low"], p["high"], size=size)
        if self.name == "constant":
            return np.full(size, float(p["value"]))
        raise ValueError(f"unknown distribution: {self.name}")

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionSpec":
        return cls(d["name"], dict(d["params"]))


def default_value_distribution() -> DistributionSpec:
    return DistributionSpec("beta", {"a": 2.0, "b": 5.0})


def default_competitor_distribution() -> DistributionSpec:
    return DistributionSpec("lognormal", {"mean": -1.0, "sigma": 0.5})


@dataclass
class ImpressionOpportunity:
    """One auction round: private value, predicted CTR, top competing bid."""

    value: float
    pctr: float
    competitor_bid: float
    step_index: int

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0):
            raise ValueError(f"value must be in [0, 1], got {self.value}")
        if not (0.0 <= self.pctr <= 1.0):
            raise ValueError(f"pctr must be in [0, 1], got {self.pctr}")
        if self.competitor_bid < 0.0:
            raise ValueError(f"competitor_bid must be >= 0, got {self.competitor_bid}")


@dataclass
class AuctionOutcome:
    won: bool
    cost: float
    clicked: bool

    def __post_init__(self):
        if not self.won and (self.cost != 0.0 or self.clicked):
            raise ValueError("lost auctions carry no cost and no click")


@dataclass
class EpisodeConfig:
    """Environment parameters for one campaign episode."""

    budget: float
    cpc_limit: float
    num_steps: int = 48
    impressions_per_step: int = 50
    value_distribution: DistributionSpec = field(default_factory=default_value_distribution)
    competitor_distribution: DistributionSpec = field(default_factory=default_competitor_distribution)
    seed: int = 0
    # featurization scales: the action ceiling normalizes the previous action,
    # value_scale normalizes cumulative value (None: half of max winnable value)
    action_ceiling: float = 10.0
    value_scale: float | None = None

    def __post_init__(self):
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.cpc_limit <= 0:
            raise ValueError("cpc_limit must be positive")
        if self.num_steps < 1 or self.impressions_per_step < 1:
            raise ValueError("num_steps and impressions_per_step must be >= 1")
        if self.action_ceiling <= 0:
            raise ValueError("action_ceiling must be positive")

    @property
    def resolved_value_scale(self) -> float:
        if self.value_scale is not None:
            return self.value_scale
        return 0.5 * self.num_steps * self.impressions_per_step

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "cpc_limit": self.cpc_limit,
            "num_steps": self.num_steps,
            "impressions_per_step": self.impressions_per_step,
            "value_distribution": self.value_distribution.to_dict(),
            "competitor_distribution": self.competitor_distribution.to_dict(),
            "seed": self.seed,
            "action_ceiling": self.action_ceiling,
            "value_scale": self.value_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        d = dict(d)
        d["value_distribution"] = DistributionSpec.from_dict(d["value_distribution"])
        d["competitor_distribution"] = DistributionSpec.from_dict(d["competitor_distribution"])
        return cls(**d)


STATE_DIM = 16
# Ratio features (pacing, KPI) get 0.5 headroom above 1 before clipping.
RATIO_CAP = 1.5


@dataclass
class StepState:
    """The 16-dimensional campaign state vector. Layout (fixed contract):

    0 elapsed fraction t/T          8 last-step reward
    1 remaining fraction 1 - t/T    9 win rate, last 3 steps
    2 remaining budget fraction    10 mean cost per win, last 3 steps
    3 spend velocity (capped 1.5)  11 mean value per win, last 3 steps
    4 CPC / limit (capped 1.5)     12 mean reward per step, last 3 steps
    5 last-step win rate           13 previous action / action ceiling
    6 last-step mean cost per win  14 cumulative value / value scale
    7 last-step mean value per win 15 constant 1.0 bias
    """

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.features.shape != (STATE_DIM,):
            raise ValueError(f"state must have {STATE_DIM} features, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("state features must be finite")
        head = self.features[:5]
        if np.any(head < 0.0) or np.any(head > RATIO_CAP):
            raise ValueError(f"normalized features out of [0, {RATIO_CAP}]: {head}")


@dataclass
class StepAggregate:
    """Per-step summary used for recent-window features and policy history."""

    wins: int
    opportunities: int
    cost: float
    value: float
    reward: float
    action: float


@dataclass
class EpisodeResult:
    total_value: float
    total_cost: float
    total_clicks: int
    per_step_rewards: np.ndarray
    realized_cpc: float
    trajectory: Trajectory


def compute_bid(coef: float, opp: ImpressionOpportunity) -> float:
    """Bid = coefficient * impression value (scalar control, action dim 1)."""
    if not math.isfinite(coef) or coef <= 0.0:
        raise ValueError(f"invalid coefficient: {coef}")
    return coef * opp.value


def run_step(coef: float, opportunities: Sequence[ImpressionOpportunity],
             remaining_budget: float, rng: np.random.Generator
             ) -> tuple[list[AuctionOutcome], float]:
    """Auction every opportunity in order at bid = coef * value.

    A win requires the bid to strictly beat the top competitor AND the
    second-price charge to fit the remaining budget (otherwise the
    impression is forfeited, which is a normal path, not an error).
    Budget exhaustion within the step is tracked exactly: the gate
    compares the running spend so the invariant spend <= remaining_budget
    holds in floating point, not just to tolerance.
    """
    if remaining_budget < 0:
        raise ValueError("remaining_budget must be >= 0")
    outcomes: list[AuctionOutcome] = []
    reward = 0.0
    spent = 0.0
    for opp in opportunities:
        bid = compute_bid(coef, opp)
        cost = opp.competitor_bid
        if bid > cost and spent + cost <= remaining_budget:
            spent = spent + cost
            clicked = bool(rng.random() < opp.pctr)
            outcomes.append(AuctionOutcome(True, cost, clicked))
            reward += opp.value
        else:
            outcomes.append(AuctionOutcome(False, 0.0, False))
    return outcomes, reward


def featurize_state(t: int, config: EpisodeConfig, spent: float, clicks: int,
                    value_so_far: float, recent: Sequence[StepAggregate],
                    prev_action: float) -> StepState:
    """Build the 16-feature state at the start of step ``t``.

    ``recent`` holds the StepAggregates of up to the last 3 completed steps,
    most recent last. Ratio features are capped at 1.5 to keep the state
    inside its contract when the campaign overspends or blows the KPI.
    """
    T = config.num_steps
    if not (0 <= t < T):
        raise ValueError(f"step index {t} out of range [0, {T})")
    if not (0.0 <= spent <= config.budget):
        raise ValueError(f"spent {spent} outside [0, budget={config.budget}]")

    f = np.zeros(STATE_DIM)
    f[0] = t / T
    f[1] = 1.0 - t / T
    f[2] = (config.budget - spent) / config.budget
    f[3] = min(spent / (config.budget * max(t, 1) / T), RATIO_CAP)
    f[4] = min((spent / clicks) / config.cpc_limit, RATIO_CAP) if clicks > 0 else 0.0

    def window_feats(window: Sequence[StepAggregate]) -> tuple[float, float, float, float]:
        if not window:
            return 0.0, 0.0, 0.0, 0.0
        wins = sum(a.wins for a in window)
        opps = sum(a.opportunities for a in window)
        cost = sum(a.cost for a in window)
        value = sum(a.value for a in window)
        reward = sum(a.reward for a in window) / len(window)
        return wins / max(opps, 1), cost / max(wins, 1), value / max(wins, 1), reward

    f[5], f[6], f[7], f[8] = window_feats(recent[-1:])
    f[9], f[10], f[11], f[12] = window_feats(recent[-3:])
    f[13] = prev_action / config.action_ceiling
    f[14] = value_so_far / config.resolved_value_scale
    f[15] = 1.0
    return StepState(f)


def episode_rng(seed: int, episode_id: int) -> np.random.Generator:
    """Independent stream per (seed, episode_id); safe for parallel episodes."""
    return np.random.default_rng([seed, episode_id])


def sample_opportunities(config: EpisodeConfig, rng: np.random.Generator
                         ) -> list[list[ImpressionOpportunity]]:
    """Draw the full episode's impressions up front, one list per step.

    Impression value doubles as the predicted CTR (values are CTR-derived
    and live in [0, 1]), so pctr == value.
    """
    T, I = config.num_steps, config.impressions_per_step
    values = np.clip(config.value_distribution.sample(rng, (T, I)), 0.0, 1.0)
    comps = np.maximum(config.competitor_distribution.sample(rng, (T, I)), 0.0)
    return [
        [ImpressionOpportunity(values[t, i], values[t, i], comps[t, i], t)
         for i in range(I)]
        for t in range(T)
    ]


Policy = Callable[[StepState, list[StepAggregate]], float]


def run_episode(policy: Policy, config: EpisodeConfig,
                episode_id: int = 0) -> EpisodeResult:
    """Run one episode under ``policy``; deterministic given (seed, policy).

    The policy is called once per step with the current StepState and the
    full step history. It must return a finite positive bid coefficient;
    anything else aborts the episode.
    """
    rng = episode_rng(config.seed, episode_id)
    steps = sample_opportunities(config, rng)

    T = config.num_steps
    states = np.zeros((T, STATE_DIM))
    actions = np.zeros(T)
    rewards = np.zeros(T)
    history: list[StepAggregate] = []

    remaining = config.budget
    spent = 0.0
    clicks = 0
    value_so_far = 0.0

    for t in range(T):
        prev_action = history[-1].action if history else 0.0
        state = featurize_state(t, config, spent, clicks, value_so_far,
                                history[-3:], prev_action)
        action = float(policy(state, history))
        if not math.isfinite(action) or action <= 0.0:
            raise InvalidActionError(f"invalid action at step {t}: {action}")

        outcomes, reward = run_step(action, steps[t], remaining, rng)
        step_cost = 0.0
        wins = 0
        for o in outcomes:
            if o.won:
                step_cost = step_cost + o.cost
                wins += 1
                clicks += int(o.clicked)
        # replicate run_step's accumulation so remaining stays exact
        remaining = remaining - step_cost
        spent = config.budget - remaining
        value_so_far += reward

        states[t] = state.features
        actions[t] = action
        rewards[t] = reward
        history.append(StepAggregate(wins, len(outcomes), step_cost, reward,
                                     reward, action))

    total_cost = config.budget - remaining
    total_value = float(rewards.sum())
    trajectory = Trajectory.from_rewards(episode_id, config, states, actions, rewards)
    return EpisodeResult(
        total_value=total_value,
        total_cost=total_cost,
        total_clicks=clicks,
        per_step_rewards=rewards,
        realized_cpc=total_cost / max(clicks, 1),
        trajectory=trajectory,
    )
