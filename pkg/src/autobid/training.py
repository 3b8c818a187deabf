"""Offline training pipeline.

Behavior data comes from a PID pacing controller whose bid coefficient is
multiplicatively perturbed per step (factors in [0.8, 1.2]). Training
samples context windows ending at uniform offsets, left-pads them, and
optimizes the composite objective:

    total = policy + value + lambda_b * balance + lambda_d * diversity

where the value and MoE terms drop out under their ablation flags.
Checkpoints capture parameters, optimizer state, the data-stream RNG and
normalization statistics, so a resumed run reproduces the loss trace.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, ParameterStore, Tensor
from .action_moe import ActionMoE, balance_loss, diversity_loss
from .auction import EpisodeConfig, StepAggregate, StepState, run_episode
from .model import BiddingTransformer, ModelConfig, policy_loss
from .trajectories import Trajectory, compute_rtg
from .value_estimator import ValueEstimator, dynamic_targets, value_loss


class TrainingDivergedError(RuntimeError):
    """A loss component went non-finite."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    num_steps: int = 3000
    seq_len: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-2
    adam_eps: float = 1e-8
    lambda_b: float = 0.1
    lambda_d: float = 0.1
    use_action_moe: bool = True
    use_value_estimator: bool = True
    seed: int = 0
    num_experts: int = 6
    lambda_aux: float = 0.2
    gamma_pen: float = 2.0
    sigma: float | None = None       # None: 0.01 * rtg_scale
    value_weight_ramp: bool = False
    stop_value_gradient: bool = False
    rtg_eval_percentile: float = 90.0
    checkpoint_every: int = 0
    # inert knobs carried for config compatibility; nothing consumes them
    # (discount has no undiscounted-RTG consumer, tau/expectile no equation)
    discount: float = 0.99
    tau: float = 0.01
    expectile: float = 0.7
    use_discounted_rtg: bool = False

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=32, num_steps=3000, lr=1e-3)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=128, num_steps=400_000, lr=1e-5)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- behavior policy ----------------------------------------------------------

@dataclass
class PIDConfig:
    kp: float = 0.5
    ki: float = 0.05
    kd: float = 0.0
    base_coef: float = 1.0
    min_coef: float = 0.05
    integral_clamp: float = 10.0


class PIDPolicy:
    """Budget-pacing controller: tracks a linear spend schedule by nudging
    the bid coefficient; optionally perturbs each executed action by an
    independent uniform factor in [0.8, 1.2]."""

    def __init__(self, config: EpisodeConfig, pid: PIDConfig | None = None,
                 rng: np.random.Generator | None = None,
                 perturb_low: float = 0.8, perturb_high: float = 1.2):
        self.config = config
        self.pid = pid if pid is not None else PIDConfig()
        self.rng = rng
        self.perturb_low = perturb_low
        self.perturb_high = perturb_high
        self.integral = 0.0
        self.prev_error: float | None = None
        self.log: list[tuple[float, float]] = []  # (unperturbed, executed)

    def __call__(self, state: StepState, history: list[StepAggregate]) -> float:
        t = len(history)
        target_frac = t / self.config.num_steps
        actual_frac = 1.0 - state.features[2]
        error = target_frac - actual_frac

        p = self.pid
        self.integral = float(np.clip(self.integral + error,
                                      -p.integral_clamp, p.integral_clamp))
        derivative = 0.0 if self.prev_error is None else error - self.prev_error
        self.prev_error = error

        coef = p.base_coef + p.kp * error + p.ki * self.integral + p.kd * derivative
        # clamp before perturbing so the executed action stays under the ceiling
        ceiling = self.config.action_ceiling / self.perturb_high
        coef = float(np.clip(coef, p.min_coef, ceiling))

        executed = coef
        if self.rng is not None:
            executed = coef * float(self.rng.uniform(self.perturb_low,
                                                     self.perturb_high))
        self.log.append((coef, executed))
        return executed


# -- dataset -------------------------------------------------------------------

@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory]
    state_mean: np.ndarray
    state_std: np.ndarray
    discount: float | None = None

    @classmethod
    def from_trajectories(cls, trajectories: list[Trajectory],
                          discount: float | None = None) -> "TrajectoryDataset":
        if not trajectories:
            raise ValueError("dataset needs at least one trajectory")
        if discount is not None:
            trajectories = [
                replace(t, rtg=_discounted_rtg(t.rewards, discount))
                for t in trajectories
            ]
        states = np.concatenate([t.states for t in trajectories])
        mean = states.mean(axis=0)
        std = np.maximum(states.std(axis=0), 1e-6)
        ds = cls(trajectories, mean, std, discount)
        ds.validate()
        return ds

    def validate(self) -> None:
        lengths = {t.num_steps for t in self.trajectories}
        if len(lengths) != 1:
            raise ValueError(f"trajectories must share one length, got {lengths}")
        for traj in self.trajectories:
            if self.discount is None:
                for t in range(traj.num_steps - 1):
                    if traj.rtg[t] != traj.rtg[t + 1] + traj.rewards[t]:
                        raise ValueError(
                            f"rtg telescoping violated in episode {traj.episode_id}")

    @property
    def num_steps(self) -> int:
        return self.trajectories[0].num_steps

    def returns(self) -> np.ndarray:
        return np.array([t.rtg[0] for t in self.trajectories])

    def percentile_return(self, q: float) -> float:
        return float(np.percentile(self.returns(), q))

    def normalize(self, states: np.ndarray) -> np.ndarray:
        return (states - self.state_mean) / self.state_std


def _discounted_rtg(rewards: np.ndarray, discount: float) -> np.ndarray:
    out = np.zeros_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


def generate_behavior_data(num_episodes: int, env_config: EpisodeConfig,
                           seed: int, pid: PIDConfig | None = None,
                           perturb: bool = True,
                           discount: float | None = None) -> TrajectoryDataset:
    """Log ``num_episodes`` PID-controlled episodes into a dataset.

    Episode i uses the environment stream (env_config.seed, i) and an
    independent perturbation stream derived from ``seed``; runs are
    reproducible and episodes are independent.
    """
    if num_episodes < 1:
        raise ValueError("num_episodes must be >= 1")
    trajectories = []
    for ep in range(num_episodes):
        rng = np.random.default_rng([seed, ep, 0xB1D]) if perturb else None
        policy = PIDPolicy(env_config, pid, rng)
        result = run_episode(policy, env_config, episode_id=ep)
        trajectories.append(result.trajectory)
    return TrajectoryDataset.from_trajectories(trajectories, discount)


# -- batching -------------------------------------------------------------------

@dataclass
class Batch:
    rtg: np.ndarray           # [B, K] raw return-to-go
    states: np.ndarray        # [B, K, 16] normalized
    prev_actions: np.ndarray  # [B, K]
    actions: np.ndarray       # [B, K] targets
    mask: np.ndarray          # [B, K] 1.0 = real token
    t_frac: np.ndarray        # [B, K] raw state features for value targets
    budget_frac: np.ndarray   # [B, K]
    cpc_t: np.ndarray         # [B, K]
    cpc_limit: np.ndarray     # [B, K]

    @property
    def pad_mask(self) -> np.ndarray:
        return self.mask.astype(bool)


def sample_batch(dataset: TrajectoryDataset, seq_len: int, batch_size: int,
                 rng: np.random.Generator) -> Batch:
    """Uniform (trajectory, end-offset) sampling with left-padded windows.

    Real tokens occupy the trailing slots; padded slots carry zeros and are
    excluded from attention and every loss through the mask.
    """
    n = len(dataset.trajectories)
    arrays = {k: np.zeros((batch_size, seq_len)) for k in
              ("rtg", "prev_actions", "actions", "mask", "t_frac",
               "budget_frac", "cpc_t", "cpc_limit")}
    states = np.zeros((batch_size, seq_len, dataset.state_mean.size))
    for b in range(batch_size):
        traj = dataset.trajectories[int(rng.integers(0, n))]
        end = int(rng.integers(0, traj.num_steps))
        start = max(0, end - seq_len + 1)
        length = end - start + 1
        sl = slice(seq_len - length, seq_len)
        window = slice(start, end + 1)
        raw = traj.states[window]
        states[b, sl] = dataset.normalize(raw)
        arrays["rtg"][b, sl] = traj.rtg[window]
        arrays["actions"][b, sl] = traj.actions[window]
        prev = np.concatenate([[0.0], traj.actions[:-1]])
        arrays["prev_actions"][b, sl] = prev[window]
        arrays["mask"][b, sl] = 1.0
        arrays["t_frac"][b, sl] = raw[:, 0]
        arrays["budget_frac"][b, sl] = raw[:, 2]
        arrays["cpc_t"][b, sl] = raw[:, 4] * traj.config.cpc_limit
        arrays["cpc_limit"][b, sl] = traj.config.cpc_limit
    return Batch(states=states, **arrays)


def build_batches(dataset: TrajectoryDataset, seq_len: int, batch_size: int,
                  rng: np.random.Generator) -> Iterator[Batch]:
    """Endless deterministic batch stream; same rng state, same batches."""
    while True:
        yield sample_batch(dataset, seq_len, batch_size, rng)


# -- the trainable bundle ---------------------------------------------------------

@dataclass
class LossBreakdown:
    policy: float
    value: float
    balance: float
    diversity: float
    total: float

    def as_tuple(self) -> tuple:
        return (self.policy, self.value, self.balance, self.diversity, self.total)


class GradModel:
    """Backbone plus the heads selected by the ablation flags, sharing one
    parameter store (so disabled heads own no parameters at all)."""

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig):
        self.model_config = model_config
        self.train_config = train_config
        self.store = ParameterStore(train_config.seed)
        self.transformer = BiddingTransformer(model_config, store=self.store)
        self.value_head = None
        self.moe = None
        if train_config.use_value_estimator:
            self.value_head = ValueEstimator(
                self.store, model_config.hidden_size,
                stop_backbone_gradient=train_config.stop_value_gradient)
        if train_config.use_action_moe:
            self.moe = ActionMoE(
                self.store, model_config.hidden_size,
                num_experts=train_config.num_experts,
                action_scale=model_config.action_scale,
                lambda_aux=train_config.lambda_aux)

    @property
    def sigma(self) -> float:
        if self.train_config.sigma is not None:
            return self.train_config.sigma
        return 0.01 * self.model_config.rtg_scale


class Trainer:
    def __init__(self, dataset: TrajectoryDataset, model_config: ModelConfig,
                 train_config: TrainConfig):
        self.dataset = dataset
        self.bundle = GradModel(model_config, train_config)
        cfg = train_config
        self.config = cfg
        self.optimizer = AdamW(self.bundle.store, lr=cfg.lr,
                               eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 0xDA7A])
        self.step_count = 0
        self.history: list[LossBreakdown] = []

    # -- one optimization step -----------------------------------------------
    def compute_losses(self, batch: Batch) -> tuple[Tensor, LossBreakdown]:
        bundle = self.bundle
        cfg = self.config
        b, k = batch.rtg.shape
        hidden, actions_hat = bundle.transformer.forward(
            batch.rtg, batch.states, batch.prev_actions, pad_mask=batch.pad_mask)

        l_policy = policy_loss(actions_hat, batch.actions, batch.mask)
        total = l_policy
        l_value_item = 0.0
        l_balance_item = 0.0
        l_div_item = 0.0

        if bundle.value_head is not None:
            targets = dynamic_targets(
                batch.t_frac, batch.cpc_t, batch.cpc_limit, batch.budget_frac,
                batch.rtg, gamma_pen=cfg.gamma_pen, sigma=bundle.sigma,
                rng=self.rng)
            l_value = value_loss(bundle.value_head(hidden), targets, batch.mask,
                                 weight_ramp=cfg.value_weight_ramp)
            total = ad.add(total, l_value)
            l_value_item = l_value.item()

        if bundle.moe is not None:
            h = bundle.transformer.config.hidden_size
            flat_hidden = ad.reshape(hidden, (b * k, h))
            moe_out = bundle.moe.forward(flat_hidden, batch.prev_actions.reshape(-1),
                                         self.rng)
            l_balance = balance_loss(moe_out.routing_probs, moe_out.chosen,
                                     flat_hidden, moe_out.shared,
                                     cfg.lambda_aux,
                                     token_weights=batch.mask.reshape(-1))
            refined = ad.reshape(moe_out.refined, (b, k, bundle.moe.num_experts))
            l_div = diversity_loss(refined, actions_hat.detach(), batch.mask)
            total = ad.add(total, ad.scale(l_balance, cfg.lambda_b))
            total = ad.add(total, ad.scale(l_div, cfg.lambda_d))
            l_balance_item = l_balance.item()
            l_div_item = l_div.item()

        breakdown = LossBreakdown(l_policy.item(), l_value_item, l_balance_item,
                                  l_div_item, total.item())
        for name, val in zip(("policy", "value", "balance", "diversity", "total"),
                             breakdown.as_tuple()):
            if not math.isfinite(val):
                raise TrainingDivergedError(
                    f"non-finite {name} loss at step {self.step_count}")
        return total, breakdown

    def train_step(self, batch: Batch) -> LossBreakdown:
        self.optimizer.zero_grad()
        total, breakdown = self.compute_losses(batch)
        total.backward()
        self.optimizer.step()
        self.step_count += 1
        self.history.append(breakdown)
        return breakdown

    def run(self, num_steps: int | None = None, out_dir=None,
            log_every: int = 0) -> list[LossBreakdown]:
        num_steps = num_steps if num_steps is not None else self.config.num_steps
        out_dir = Path(out_dir) if out_dir is not None else None
        csv_rows = []
        for _ in range(num_steps):
            batch = sample_batch(self.dataset, self.config.seq_len,
                                 self.config.batch_size, self.rng)
            breakdown = self.train_step(batch)
            csv_rows.append((self.step_count,) + breakdown.as_tuple())
            if log_every and self.step_count % log_every == 0:
                print(f"step {self.step_count:6d} "
                      f"policy {breakdown.policy:.5f} value {breakdown.value:.3f} "
                      f"balance {breakdown.balance:.4f} div {breakdown.diversity:.4f} "
                      f"total {breakdown.total:.3f}")
            if (out_dir and self.config.checkpoint_every
                    and self.step_count % self.config.checkpoint_every == 0):
                self.save_checkpoint(out_dir / f"step{self.step_count:07d}")
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            with (out_dir / "losses.csv").open("a", newline="") as fh:
                writer = csv.writer(fh)
                if fh.tell() == 0:
                    writer.writerow(["step", "policy", "value", "balance",
                                     "diversity", "total"])
                writer.writerows(csv_rows)
            self.save_checkpoint(out_dir / "final")
        return self.history[-num_steps:] if num_steps else []

    # -- persistence -------------------------------------------------------------
    def save_checkpoint(self, directory) -> None:
        directory = Path(directory)
        self.bundle.store.save(directory)
        _save_arrays(directory, "optim", self.optimizer.state_arrays())
        meta = {
            "model_config": self.bundle.model_config.to_dict(),
            "train_config": self.config.to_dict(),
            "state_mean": self.dataset.state_mean.tolist(),
            "state_std": self.dataset.state_std.tolist(),
            "rtg_target": self.dataset.percentile_return(
                self.config.rtg_eval_percentile),
            "step_count": self.step_count,
            "adam_t": self.optimizer.t,
            "rng_state": self.rng.bit_generator.state,
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load_checkpoint(cls, directory, dataset: TrajectoryDataset) -> "Trainer":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        trainer = cls(dataset, ModelConfig.from_dict(meta["model_config"]),
                      TrainConfig.from_dict(meta["train_config"]))
        trainer.bundle.store.load(directory)
        trainer.optimizer.load_state_arrays(
            _load_arrays(directory, "optim"), meta["adam_t"])
        trainer.step_count = meta["step_count"]
        trainer.rng.bit_generator.state = meta["rng_state"]
        return trainer


def _save_arrays(directory, name: str, arrays: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = [{"path": k, "shape": list(v.shape)} for k, v in arrays.items()]
    payload = np.concatenate([v.reshape(-1) for v in arrays.values()]) \
        if arrays else np.zeros(0)
    (directory / f"{name}.json").write_text(json.dumps(manifest))
    payload.astype("<f8").tofile(directory / f"{name}.bin")


def _load_arrays(directory, name: str) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / f"{name}.json").read_text())
    payload = np.fromfile(directory / f"{name}.bin", dtype="<f8")
    out = {}
    offset = 0
    for m in manifest:
        shape = tuple(m["shape"])
        size = int(np.prod(shape)) if shape else 1
        out[m["path"]] = payload[offset:offset + size].reshape(shape).copy()
        offset += size
    return out


# -- checkpointed policy for rollouts ---------------------------------------------

class InferenceModel:
    """A frozen checkpoint rebuilt for evaluation rollouts."""

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig,
                 state_mean: np.ndarray, state_std: np.ndarray,
                 rtg_target: float):
        self.bundle = GradModel(model_config, train_config)
        self.state_mean = state_mean
        self.state_std = state_std
        self.rtg_target = rtg_target

    @classmethod
    def load(cls, directory) -> "InferenceModel":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        model = cls(ModelConfig.from_dict(meta["model_config"]),
                    TrainConfig.from_dict(meta["train_config"]),
                    np.asarray(meta["state_mean"]),
                    np.asarray(meta["state_std"]),
                    meta["rtg_target"])
        model.bundle.store.load(directory)
        return model


class TransformerPolicy:
    """Adapter from the trained model to the environment's policy callback.

    Maintains the rolling context window; the conditioning return-to-go
    starts at ``rtg_target`` and is decremented by realized rewards. In
    explore mode the executed action is the MoE aggregate instead of the
    policy head output.
    """

    def __init__(self, inference: InferenceModel, rtg_target: float | None = None,
                 explore: bool = False, rng: np.random.Generator | None = None):
        self.inference = inference
        self.rtg_target = (rtg_target if rtg_target is not None
                           else inference.rtg_target)
        self.explore = explore
        self.rng = rng
        if explore and inference.bundle.moe is None:
            raise ValueError("explore mode needs a model trained with ActionMoE")
        if explore and rng is None:
            raise ValueError("explore mode needs an rng")
        self.reset()

    def reset(self) -> None:
        self._states: list[np.ndarray] = []

    def __call__(self, state: StepState, history: list[StepAggregate]) -> float:
        if len(history) < len(self._states):
            self.reset()  # a fresh episode reuses this policy
        inf = self.inference
        seq_len = inf.bundle.model_config.seq_len
        normalized = (state.features - inf.state_mean) / inf.state_std
        self._states.append(normalized)

        realized = sum(h.reward for h in history)
        rtg_now = self.rtg_target - realized
        rewards = [h.reward for h in history]
        actions = [h.action for h in history]
        # per-step conditioning: the remaining target at step u
        rtg_sequence = [self.rtg_target - sum(rewards[:u])
                        for u in range(len(history) + 1)]
        rtg_sequence[-1] = rtg_now
        prev_actions = [0.0] + actions

        window = slice(max(0, len(self._states) - seq_len), None)
        rtg = np.asarray(rtg_sequence)[window][None]
        states = np.stack(self._states)[window][None]
        prev = np.asarray(prev_actions)[window][None]

        hidden, actions_hat = inf.bundle.transformer.forward(rtg, states, prev)
        if not self.explore:
            return float(actions_hat.value[0, -1])
        h = hidden.value[0, -1][None]
        moe_out = inf.bundle.moe.forward(Tensor(h), np.array([prev[0, -1]]),
                                         self.rng)
        return float(moe_out.aggregate.value[0])


def default_episode_config(**overrides) -> EpisodeConfig:
    """The reference desk-scale campaign used by demos and experiments."""
    base = dict(budget=150.0, cpc_limit=0.8, num_steps=48,
                impressions_per_step=50, seed=0)
    base.update(overrides)
    return EpisodeConfig(**base)
