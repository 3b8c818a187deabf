"""Constraint-aware value head and its dynamic regression target.

The head is a 2-layer MLP over the backbone hidden states predicting a
reward signal that is the return-to-go modulated by three multipliers:
an elapsed-time factor exp(t_frac) in [1, e], a CPC-overrun penalty
min(1, (limit/realized)^gamma) and the remaining-budget fraction, plus
Gaussian observation noise during training. Targets are plain numbers
(no gradient flows through them).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .model import _MLP


@dataclass
class ValueContext:
    """Inputs to one dynamic target. t_frac and budget_frac live in [0, 1]."""

    t_frac: float
    cpc_t: float
    cpc_limit: float
    budget_frac: float
    rtg: float
    gamma_pen: float = 2.0
    sigma: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.t_frac <= 1.0):
            raise ValueError(f"t_frac must be in [0, 1], got {self.t_frac}")
        if not (0.0 <= self.budget_frac <= 1.0):
            raise ValueError(f"budget_frac must be in [0, 1], got {self.budget_frac}")
        if self.gamma_pen < 1.0:
            raise ValueError(f"gamma_pen must be >= 1, got {self.gamma_pen}")
        if self.sigma < 0.0 or self.cpc_t < 0.0 or self.cpc_limit <= 0.0:
            raise ValueError("sigma and cpc_t must be >= 0, cpc_limit > 0")


def time_multiplier(t_frac, increasing: bool = True):
    """exp(t_frac), in [1, e] for t_frac in [0, 1]; sign flip gives decay."""
    return np.exp(t_frac) if increasing else np.exp(-np.asarray(t_frac))


def cost_penalty(cpc_t, cpc_limit, gamma_pen):
    """min(1, (limit/realized)^gamma); no penalty before the first click."""
    cpc_t = np.asarray(cpc_t, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        ratio = np.where(cpc_t > 0, cpc_limit / np.where(cpc_t > 0, cpc_t, 1.0), np.inf)
        # the power may overflow to inf for tiny cpc; the min clamps it anyway
        return np.minimum(1.0, ratio ** float(gamma_pen))


def dynamic_target(ctx: ValueContext, rng: np.random.Generator | None = None,
                   increasing_time: bool = True) -> float:
    """Target R = time_mult * cost_penalty * budget_frac * rtg + noise."""
    gamma = float(time_multiplier(ctx.t_frac, increasing_time))
    omega = float(cost_penalty(ctx.cpc_t, ctx.cpc_limit, ctx.gamma_pen))
    noise = 0.0
    if ctx.sigma > 0.0:
        if rng is None:
            raise ValueError("sigma > 0 requires an rng")
        noise = float(rng.normal(0.0, ctx.sigma))
    return gamma * omega * ctx.budget_frac * ctx.rtg + noise


def dynamic_targets(t_frac: np.ndarray, cpc_t: np.ndarray, cpc_limit: float,
                    budget_frac: np.ndarray, rtg: np.ndarray,
                    gamma_pen: float = 2.0, sigma: float = 0.0,
                    rng: np.random.Generator | None = None,
                    increasing_time: bool = True) -> np.ndarray:
    """Vectorized dynamic_target over arrays of per-token contexts."""
    gamma = time_multiplier(t_frac, increasing_time)
    omega = cost_penalty(cpc_t, cpc_limit, gamma_pen)
    targets = gamma * omega * budget_frac * rtg
    if sigma > 0.0:
        if rng is None:
            raise ValueError("sigma > 0 requires an rng")
        targets = targets + rng.normal(0.0, sigma, size=targets.shape)
    return targets


class ValueEstimator:
    """2-layer MLP head from hidden states to an unbounded scalar value."""

    def __init__(self, store: ParameterStore, hidden_size: int,
                 path: str = "value", stop_backbone_gradient: bool = False):
        self.mlp = _MLP(store, path, hidden_size, hidden_size, 1)
        self.stop_backbone_gradient = stop_backbone_gradient

    def __call__(self, hidden: Tensor) -> Tensor:
        """Per-token value predictions with the last axis squeezed away."""
        if self.stop_backbone_gradient:
            hidden = hidden.detach()
        out = self.mlp(hidden)
        return ad.reshape(out, hidden.shape[:-1])


def value_loss(predictions: Tensor, targets, mask: np.ndarray | None = None,
               weight_ramp: bool = False) -> Tensor:
    """Uniform-mean MSE between predictions and targets.

    ``weight_ramp`` switches on the optional late-step emphasis
    w_t = 1 + t/T along the last axis.
    """
    targets = targets if isinstance(targets, Tensor) else Tensor(targets)
    if predictions.shape != targets.shape:
        raise ad.ShapeError(
            f"value_loss length mismatch: {predictions.shape} vs {targets.shape}")
    weights = np.ones(predictions.shape)
    if weight_ramp:
        t = predictions.shape[-1]
        weights = weights * (1.0 + np.arange(t) / t)
    if mask is not None:
        weights = weights * np.asarray(mask, dtype=np.float64)
        norm = max(np.asarray(mask, dtype=np.float64).sum(), 1.0)
    else:
        norm = predictions.value.size
    diff = ad.sub(predictions, targets)
    weighted = ad.mul(ad.mul(diff, diff), Tensor(weights))
    return ad.scale(ad.sum_(weighted), 1.0 / norm)


def score_candidates(model, value_head: ValueEstimator,
                     tokens: list, candidates) -> np.ndarray:
    """Rank candidate actions by a one-step-lookahead value estimate.

    Each candidate is appended to the context as the previous action of a
    hypothetical next token (state and return-to-go carried forward), and
    the value head reads the hidden state at that new position. Returns
    one score per candidate. Inference only; never used to train.
    """
    cand = np.asarray(getattr(candidates, "candidates", candidates),
                      dtype=np.float64).reshape(-1)
    m = cand.size
    window = list(tokens)[-(model.config.seq_len - 1):]
    t = len(window) + 1
    last = window[-1]
    rtg = np.tile([tok.rtg for tok in window] + [last.rtg], (m, 1))
    states = np.tile(np.stack([tok.state for tok in window] + [last.state]),
                     (m, 1, 1))
    prev = np.tile([tok.prev_action for tok in window] + [0.0], (m, 1))
    prev[:, -1] = cand
    positions = np.arange(t)
    hidden, _ = model.forward(rtg, states, prev, positions)
    last_hidden = ad.take_rows(ad.reshape(hidden, (m * t, hidden.shape[-1])),
                               np.arange(t - 1, m * t, t))
    return value_head(last_hidden).value.copy()
