"""Mixture-of-experts exploration head.

Candidate actions come from multiplicative perturbation of the previous
action (factors uniform in [0.8, 1.2)). Hidden states pass through two
pathways: an always-on shared feed-forward expert and one of M routed
experts picked by top-1 dot-product routing. Only the chosen expert is
evaluated, so unchosen experts receive exactly zero gradient from a
token. The fused state refines the candidates through a scalar residual,
yielding a per-candidate ensemble (consumed by the diversity loss) and a
single aggregate exploratory action.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .model import _MLP

PERTURB_LOW = 0.8
PERTURB_HIGH = 1.2


@dataclass
class CandidateActionSet:
    """Perturbed action candidates and the factors that produced them."""

    candidates: np.ndarray  # [..., M]
    factors: np.ndarray     # [..., M], each in [0.8, 1.2)

    @property
    def num_candidates(self) -> int:
        return self.candidates.shape[-1]


@dataclass
class RoutingDecision:
    """One token's expert selection: simplex probabilities, argmax, one-hot."""

    probabilities: np.ndarray
    chosen: int
    gate: np.ndarray


@dataclass
class MoEOutput:
    shared: Tensor
    routed: Tensor
    fused: Tensor
    residual: Tensor            # U_t, one scalar per token
    refined: Tensor             # per-candidate ensemble [..., M]
    aggregate: Tensor           # single exploratory action per token
    mixture_weights: np.ndarray
    routing_probs: Tensor | None = None
    chosen: np.ndarray | None = None
    candidates: CandidateActionSet | None = None


def perturb_candidates(prev_action, m: int, rng: np.random.Generator,
                       low: float = PERTURB_LOW, high: float = PERTURB_HIGH
                       ) -> CandidateActionSet:
    """Scale the previous action by M independent uniform factors.

    Factors are drawn independently per candidate, per position and per
    batch element; prev_action may be a scalar or any-shaped array.
    """
    if m < 1:
        raise ValueError(f"need at least one candidate, got M={m}")
    prev = np.asarray(prev_action, dtype=np.float64)
    factors = rng.uniform(low, high, size=prev.shape + (m,))
    return CandidateActionSet(prev[..., None] * factors, factors)


def route(h: np.ndarray, expert_embeddings: np.ndarray) -> RoutingDecision:
    """Top-1 routing of one token: softmax of dot-product logits, argmax
    with lowest-index tie-break, one-hot gate."""
    h = np.asarray(h, dtype=np.float64)
    e = np.asarray(expert_embeddings, dtype=np.float64)
    if h.shape[-1] != e.shape[-1]:
        raise ad.ShapeError(f"routing dims differ: h {h.shape} vs experts {e.shape}")
    logits = e @ h
    shifted = np.exp(logits - logits.max())
    probabilities = shifted / shifted.sum()
    chosen = int(np.argmax(probabilities))
    gate = np.zeros(e.shape[0])
    gate[chosen] = 1.0
    return RoutingDecision(probabilities, chosen, gate)


class ActionMoE:
    """Shared + top-1 routed expert fusion with residual action refinement."""

    def __init__(self, store: ParameterStore, hidden_size: int,
                 num_experts: int = 6, action_scale: float = 10.0,
                 lambda_aux: float = 0.2, perturb_low: float = PERTURB_LOW,
                 perturb_high: float = PERTURB_HIGH, path: str = "moe",
                 action_floor: float = 1e-6):
        if num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        self.num_experts = num_experts
        self.action_scale = action_scale
        self.lambda_aux = lambda_aux
        self.perturb_low = perturb_low
        self.perturb_high = perturb_high
        self.action_floor = action_floor
        self.expert_embeddings = store.parameter(
            f"{path}.router.embeddings", (num_experts, hidden_size), init="table")
        self.shared = _MLP(store, f"{path}.shared", hidden_size, hidden_size,
                           hidden_size)
        self.experts = [
            _MLP(store, f"{path}.expert{m}", hidden_size, hidden_size, hidden_size)
            for m in range(num_experts)
        ]
        self.residual_mlp = _MLP(store, f"{path}.residual", hidden_size,
                                 hidden_size, 1)
        self.omega_logits = store.parameter(f"{path}.omega", (num_experts,),
                                            init="zeros")

    # -- routing -----------------------------------------------------------
    def routing_probabilities(self, h: Tensor) -> tuple[Tensor, np.ndarray]:
        """Softmax routing probabilities [N, M] (differentiable) and the
        chosen expert per token (argmax, lowest index on ties)."""
        logits = ad.matmul(h, ad.transpose(self.expert_embeddings, (1, 0)))
        probs = ad.softmax(logits, axis=-1)
        chosen = np.argmax(probs.value, axis=-1)
        return probs, chosen

    def fuse(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor, np.ndarray]:
        """Shared + routed pathways combined as LayerNorm(shared + routed).

        h is [N, hidden]. Each expert runs only on the rows routed to it
        (sparse activation): unchosen experts contribute no graph nodes
        for a token, hence exactly zero gradient.
        """
        n = h.shape[0]
        probs, chosen = self.routing_probabilities(h)
        shared = self.shared(h)
        routed = None
        for m in range(self.num_experts):
            rows = np.flatnonzero(chosen == m)
            if rows.size == 0:
                continue
            expert_out = self.experts[m](ad.take_rows(h, rows))
            placed = ad.put_rows(expert_out, rows, n)
            routed = placed if routed is None else ad.add(routed, placed)
        fused = ad.layernorm(ad.add(shared, routed))
        return probs, shared, routed, fused, chosen

    # -- refinement ----------------------------------------------------------
    def mixture_weights(self) -> Tensor:
        return ad.softmax(self.omega_logits)

    def refine_actions(self, fused: Tensor, candidates: CandidateActionSet
                       ) -> tuple[Tensor, Tensor, Tensor]:
        """Residual-refined ensemble and aggregate exploratory action.

        Per candidate: r_m = omega_m * a_m + U; aggregate: a* = U + sum_m
        omega_m * a_m. Both are clamped into (0, action_scale].
        """
        n = fused.shape[0]
        m = candidates.num_candidates
        residual = ad.reshape(self.residual_mlp(fused), (n,))
        omega = self.mixture_weights()
        cand = Tensor(candidates.candidates.reshape(n, m))
        weighted = ad.mul(omega, cand)                        # [N, M]
        refined = ad.add(weighted, ad.reshape(residual, (n, 1)))
        refined = ad.clip(refined, self.action_floor, self.action_scale)
        aggregate = ad.add(ad.sum_(weighted, axis=1), residual)
        aggregate = ad.clip(aggregate, self.action_floor, self.action_scale)
        return refined, aggregate, residual

    def forward(self, h: Tensor, prev_actions: np.ndarray,
                rng: np.random.Generator) -> MoEOutput:
        """Full exploration pass over flattened tokens h [N, hidden]."""
        candidates = perturb_candidates(prev_actions, self.num_experts, rng,
                                        self.perturb_low, self.perturb_high)
        probs, shared, routed, fused, chosen = self.fuse(h)
        refined, aggregate, residual = self.refine_actions(fused, candidates)
        return MoEOutput(shared=shared, routed=routed, fused=fused,
                         residual=residual, refined=refined, aggregate=aggregate,
                         mixture_weights=self.mixture_weights().value.copy(),
                         routing_probs=probs, chosen=chosen,
                         candidates=candidates)


def balance_loss(probs: Tensor, chosen: np.ndarray, h: Tensor, shared: Tensor,
                 lambda_aux: float = 0.2,
                 token_weights: np.ndarray | None = None) -> Tensor:
    """Load-balancing plus shared-pathway anchoring.

    AUX is the top-1 load-balancing product M * sum_m u_m * p_m, with u_m
    the fraction of tokens whose argmax is expert m and p_m the mean
    routing probability. The anchor is the token-mean squared distance
    between the hidden state and the shared expert output. token_weights
    (0/1) excludes padded tokens from every average.
    """
    n, m = probs.shape
    if n == 0:
        raise ValueError("balance_loss needs a nonempty batch")
    if token_weights is None:
        token_weights = np.ones(n)
    token_weights = np.asarray(token_weights, dtype=np.float64)
    total = max(token_weights.sum(), 1.0)

    usage = np.zeros(m)
    np.add.at(usage, chosen, token_weights)
    usage /= total

    w = Tensor(token_weights[:, None])
    mean_probs = ad.scale(ad.sum_(ad.mul(probs, w), axis=0), 1.0 / total)
    aux = ad.scale(ad.sum_(ad.mul(mean_probs, Tensor(usage))), float(m))

    diff = ad.sub(h, shared)
    per_token = ad.sum_(ad.mul(diff, diff), axis=1)
    anchor = ad.scale(ad.sum_(ad.mul(per_token, Tensor(token_weights))), 1.0 / total)

    return ad.add(ad.scale(aux, lambda_aux), ad.scale(anchor, 1.0 - lambda_aux))


def diversity_loss(refined: Tensor, nominal: Tensor,
                   mask: np.ndarray | None = None) -> Tensor:
    """Mean cosine similarity between each refined action sequence and the
    nominal policy actions; minimized to push exploration away from the
    nominal trajectory.

    refined is [B, T, M], nominal [B, T]. Sequences are compared along T;
    zero-norm vectors contribute 0. The nominal side is typically detached
    so only the ensemble moves.
    """
    b, t, m = refined.shape
    if nominal.shape != (b, t):
        raise ad.ShapeError(
            f"diversity_loss shapes differ: {refined.shape} vs {nominal.shape}")
    if mask is not None:
        mw = np.asarray(mask, dtype=np.float64)
        refined = ad.mul(refined, Tensor(mw[:, :, None]))
        nominal = ad.mul(nominal, Tensor(mw))
    nominal3 = ad.reshape(nominal, (b, t, 1))
    dots = ad.sum_(ad.mul(refined, nominal3), axis=1)            # [B, M]
    norm_r = ad.sqrt(ad.sum_(ad.mul(refined, refined), axis=1))  # [B, M]
    norm_a = ad.sqrt(ad.sum_(ad.mul(nominal3, nominal3), axis=1))  # [B, 1]
    denom = ad.clip(ad.mul(norm_r, norm_a), 1e-12, np.inf)
    return ad.mean(ad.div(dots, denom))
