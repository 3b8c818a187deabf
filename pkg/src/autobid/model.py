"""Causal-transformer bidding policy.

Each timestep becomes one token: the return-to-go, the 16-dim state and
the previous action are separately embedded to hidden/4 each, concatenated
with a learned positional embedding and layer-normalized. N pre-norm
residual blocks (causal multi-head attention + ReLU feed-forward) produce
the hidden states that all prediction heads share. The policy head squashes
a 2-layer MLP through tanh and maps it affinely into (0, action_scale).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .trajectories import compute_rtg

__all__ = ["ModelConfig", "TokenInput", "BiddingTransformer", "compute_rtg",
           "policy_loss"]


@dataclass
class ModelConfig:
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    seq_len: int = 20
    action_scale: float = 10.0
    rtg_scale: float = 200.0
    ffn_multiple: int = 4

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be divisible by num_heads")
        if self.hidden_size % 4 != 0:
            raise ValueError("hidden_size must be divisible by 4 (token embedding split)")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.action_scale <= 0 or self.rtg_scale <= 0:
            raise ValueError("action_scale and rtg_scale must be positive")

    @classmethod
    def desk_scale(cls, **overrides) -> "ModelConfig":
        base = dict(hidden_size=64, num_layers=2, num_heads=4, seq_len=20)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(hidden_size=512, num_layers=8, num_heads=16, seq_len=20,
                    action_scale=493.0, rtg_scale=2000.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size, "num_layers": self.num_layers,
            "num_heads": self.num_heads, "seq_len": self.seq_len,
            "action_scale": self.action_scale, "rtg_scale": self.rtg_scale,
            "ffn_multiple": self.ffn_multiple,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenInput:
    """One timestep of policy context. prev_action is 0 at episode start."""

    rtg: float
    state: np.ndarray
    prev_action: float
    position: int


class _Linear:
    def __init__(self, store: ParameterStore, path: str, d_in: int, d_out: int):
        self.w = store.parameter(f"{path}.w", (d_in, d_out))
        self.b = store.parameter(f"{path}.b", (d_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


class _MLP:
    """Two-layer ReLU MLP."""

    def __init__(self, store, path, d_in, d_hidden, d_out):
        self.fc1 = _Linear(store, f"{path}.fc1", d_in, d_hidden)
        self.fc2 = _Linear(store, f"{path}.fc2", d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class _Block:
    """Pre-norm residual block: causal attention then feed-forward."""

    def __init__(self, store, path, config: ModelConfig):
        h = config.hidden_size
        self.config = config
        self.q = _Linear(store, f"{path}.attn.q", h, h)
        self.k = _Linear(store, f"{path}.attn.k", h, h)
        self.v = _Linear(store, f"{path}.attn.v", h, h)
        self.o = _Linear(store, f"{path}.attn.o", h, h)
        self.ffn = _MLP(store, f"{path}.ffn", h, config.ffn_multiple * h, h)

    def _split_heads(self, x: Tensor, batch: int, t: int) -> Tensor:
        cfg = self.config
        head_dim = cfg.hidden_size // cfg.num_heads
        x = ad.reshape(x, (batch, t, cfg.num_heads, head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        batch, t, h = x.shape
        normed = ad.layernorm(x)
        q = self._split_heads(self.q(normed), batch, t)
        k = self._split_heads(self.k(normed), batch, t)
        v = self._split_heads(self.v(normed), batch, t)
        att = ad.causal_attention(q, k, v, mask)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (batch, t, h))
        x = ad.add(x, self.o(att))
        return ad.add(x, self.ffn(ad.layernorm(x)))


class BiddingTransformer:
    """Backbone plus policy head. Heads for value estimation and MoE
    exploration attach to the hidden states this model returns."""

    def __init__(self, config: ModelConfig, store: ParameterStore | None = None,
                 seed: int = 0, state_dim: int = 16):
        self.config = config
        self.state_dim = state_dim
        self.store = store if store is not None else ParameterStore(seed)
        h = config.hidden_size
        quarter = h // 4
        s = self.store
        self.embed_rtg = _Linear(s, "embed.rtg", 1, quarter)
        self.embed_state = _Linear(s, "embed.state", state_dim, quarter)
        self.embed_action = _Linear(s, "embed.action", 1, quarter)
        self.embed_position = s.parameter("embed.position", (config.seq_len, quarter),
                                          init="table")
        self.blocks = [_Block(s, f"block{n}", config)
                       for n in range(config.num_layers)]
        self.policy = _MLP(s, "policy", h, h, 1)

    # -- token embedding -------------------------------------------------
    def embed_tokens(self, rtg: np.ndarray, states: np.ndarray,
                     prev_actions: np.ndarray, positions: np.ndarray | None = None
                     ) -> Tensor:
        """Level-0 hidden states [B, T, hidden] from raw token arrays.

        rtg is divided by the configured return scale before embedding.
        positions default to 0..T-1 window slots.
        """
        rtg = np.asarray(rtg, dtype=np.float64)
        states = np.asarray(states, dtype=np.float64)
        prev_actions = np.asarray(prev_actions, dtype=np.float64)
        batch, t = rtg.shape
        if t > self.config.seq_len:
            raise ValueError(f"sequence length {t} exceeds context window "
                             f"{self.config.seq_len}")
        if positions is None:
            positions = np.arange(t)
        positions = np.broadcast_to(np.asarray(positions, dtype=np.int64), (batch, t))

        eg = self.embed_rtg(Tensor((rtg / self.config.rtg_scale)[..., None]))
        es = self.embed_state(Tensor(states))
        ea = self.embed_action(Tensor(prev_actions[..., None]))
        ep = ad.embedding(self.embed_position, positions)
        return ad.layernorm(ad.concat([eg, es, ea, ep], axis=-1))

    def _attention_mask(self, t: int, pad_mask: np.ndarray | None,
                        batch: int) -> np.ndarray:
        causal = ad.make_causal_mask(t)
        if pad_mask is None:
            return causal
        pad = np.asarray(pad_mask, dtype=bool)
        # keys at padded slots are hidden from every query, but each query
        # keeps its own position so no attention row is fully masked
        allowed = causal[None, :, :] & pad[:, None, :]
        allowed |= np.eye(t, dtype=bool)[None, :, :]
        return allowed[:, None, :, :]  # broadcast over heads

    def backbone(self, h0: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        batch, t, _ = h0.shape
        mask = self._attention_mask(t, pad_mask, batch)
        x = h0
        for block in self.blocks:
            x = block(x, mask)
        return x

    def policy_head(self, hidden: Tensor) -> Tensor:
        """tanh-squashed scalar action mapped affinely into (0, action_scale)."""
        squashed = ad.tanh(self.policy(hidden))
        half = 0.5 * self.config.action_scale
        actions = ad.add(ad.scale(squashed, half), Tensor(half))
        return ad.reshape(actions, hidden.shape[:-1])

    def forward(self, rtg, states, prev_actions, positions=None, pad_mask=None
                ) -> tuple[Tensor, Tensor]:
        """Full pass: returns (final hidden states [B,T,H], actions [B,T])."""
        h0 = self.embed_tokens(rtg, states, prev_actions, positions)
        hidden = self.backbone(h0, pad_mask)
        return hidden, self.policy_head(hidden)

    def forward_tokens(self, tokens: list[TokenInput]) -> np.ndarray:
        """Single-sequence inference; returns the action at every position."""
        rtg = np.array([[tok.rtg for tok in tokens]])
        states = np.stack([tok.state for tok in tokens])[None]
        prev = np.array([[tok.prev_action for tok in tokens]])
        positions = np.array([tok.position for tok in tokens])
        _, actions = self.forward(rtg, states, prev, positions)
        return actions.value[0]


def policy_loss(predicted: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error between predicted and logged actions.

    With a mask, padded positions contribute exactly zero and the mean
    runs over real tokens only.
    """
    target = target if isinstance(target, Tensor) else Tensor(target)
    if predicted.shape != target.shape:
        raise ad.ShapeError(
            f"policy_loss length mismatch: {predicted.shape} vs {target.shape}")
    if mask is None:
        return ad.mse(predicted, target)
    mask = np.asarray(mask, dtype=np.float64)
    diff = ad.sub(predicted, target)
    weighted = ad.mul(ad.mul(diff, diff), Tensor(mask))
    return ad.scale(ad.sum_(weighted), 1.0 / max(mask.sum(), 1.0))
