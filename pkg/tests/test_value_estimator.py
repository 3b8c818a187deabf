import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autobid import autodiff as ad
from autobid.model import BiddingTransformer, ModelConfig, TokenInput
from autobid.value_estimator import (
    ValueContext,
    ValueEstimator,
    cost_penalty,
    dynamic_target,
    dynamic_targets,
    score_candidates,
    time_multiplier,
    value_loss,
)


def ctx(**overrides):
    base = dict(t_frac=0.0, cpc_t=0.0, cpc_limit=1.0, budget_frac=1.0,
                rtg=10.0, gamma_pen=2.0, sigma=0.0)
    base.update(overrides)
    return ValueContext(**base)


class TestDynamicTarget:
    def test_identity_multipliers(self):
        c = ctx(t_frac=0.0, cpc_t=0.5, cpc_limit=1.0, budget_frac=1.0, rtg=7.0)
        assert dynamic_target(c) == pytest.approx(7.0)

    def test_cpc_overrun_halves_reward(self):
        c = ctx(cpc_t=2.0, cpc_limit=1.0, gamma_pen=1.0, rtg=8.0)
        assert dynamic_target(c) == pytest.approx(4.0)

    def test_hand_evaluation_with_time_and_budget(self):
        c = ctx(t_frac=1.0, budget_frac=0.5, rtg=10.0)
        assert dynamic_target(c) == pytest.approx(math.e * 0.5 * 10.0)
        assert dynamic_target(c) == pytest.approx(13.59140914, abs=1e-6)

    def test_noise_requires_rng(self):
        with pytest.raises(ValueError, match="rng"):
            dynamic_target(ctx(sigma=0.5))

    def test_noise_statistics(self):
        rng = np.random.default_rng(0)
        sigma = 0.3
        draws = dynamic_targets(
            np.zeros(100_000), np.zeros(100_000), 1.0,
            np.ones(100_000), np.zeros(100_000), sigma=sigma, rng=rng)
        assert abs(draws.mean()) < 5 * sigma / math.sqrt(100_000)

    def test_decreasing_time_flag(self):
        c = ctx(t_frac=1.0, rtg=1.0)
        assert dynamic_target(c, increasing_time=False) == pytest.approx(1 / math.e)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(1)
        t_frac = rng.uniform(0, 1, 50)
        cpc = rng.uniform(0, 3, 50)
        budget_frac = rng.uniform(0, 1, 50)
        rtg = rng.uniform(-5, 20, 50)
        vec = dynamic_targets(t_frac, cpc, 1.5, budget_frac, rtg, gamma_pen=2.5)
        for i in range(50):
            single = dynamic_target(ctx(t_frac=t_frac[i], cpc_t=cpc[i],
                                        cpc_limit=1.5, budget_frac=budget_frac[i],
                                        rtg=rtg[i], gamma_pen=2.5))
            assert vec[i] == pytest.approx(single)


class TestMultiplierProperties:
    @given(st.floats(0, 1))
    @settings(max_examples=100, deadline=None)
    def test_time_multiplier_bounds(self, t_frac):
        g = float(time_multiplier(t_frac))
        assert 1.0 <= g <= math.e

    @given(cpc_a=st.floats(0, 10), cpc_b=st.floats(0, 10))
    @settings(max_examples=100, deadline=None)
    def test_cost_penalty_monotone_nonincreasing(self, cpc_a, cpc_b):
        lo, hi = sorted([cpc_a, cpc_b])
        assert cost_penalty(lo, 2.0, 2.0) >= cost_penalty(hi, 2.0, 2.0)

    @given(st.floats(0, 2))
    @settings(max_examples=50, deadline=None)
    def test_no_penalty_at_or_below_limit(self, cpc):
        assert cost_penalty(cpc, 2.0, 3.0) == 1.0

    def test_larger_gamma_strictly_stronger_above_limit(self):
        assert cost_penalty(4.0, 2.0, 3.0) < cost_penalty(4.0, 2.0, 1.5)

    @given(k=st.floats(0, 5), rtg=st.floats(-10, 10))
    @settings(max_examples=50, deadline=None)
    def test_linearity_in_rtg(self, k, rtg):
        base = dynamic_target(ctx(t_frac=0.3, cpc_t=1.5, budget_frac=0.7, rtg=rtg))
        scaled = dynamic_target(ctx(t_frac=0.3, cpc_t=1.5, budget_frac=0.7,
                                    rtg=k * rtg))
        assert scaled == pytest.approx(k * base, abs=1e-9)

    def test_context_validation(self):
        with pytest.raises(ValueError):
            ctx(t_frac=1.5)
        with pytest.raises(ValueError):
            ctx(budget_frac=-0.1)
        with pytest.raises(ValueError):
            ctx(gamma_pen=0.5)
        with pytest.raises(ValueError):
            ctx(sigma=-1.0)


class TestValueHead:
    def make(self, seed=0):
        cfg = ModelConfig(hidden_size=16, num_layers=1, num_heads=2, seq_len=6)
        model = BiddingTransformer(cfg, seed=seed)
        head = ValueEstimator(model.store, cfg.hidden_size)
        return model, head

    def test_zero_hidden_gives_zero(self):
        model, head = self.make()
        out = head(ad.Tensor(np.zeros((3, 16))))
        np.testing.assert_array_equal(out.value, np.zeros(3))

    def test_finite_on_random_hidden(self):
        model, head = self.make()
        rng = np.random.default_rng(0)
        out = head(ad.Tensor(rng.normal(size=(5, 16))))
        assert np.isfinite(out.value).all()

    def test_gradient_check(self):
        model, head = self.make(seed=1)
        rng = np.random.default_rng(1)
        h = ad.Tensor(rng.normal(size=(4, 16)))
        target = rng.normal(size=4)

        def build():
            return value_loss(head(h), target)

        params = [model.store["value.fc1.w"], model.store["value.fc2.w"],
                  model.store["value.fc2.b"]]
        assert ad.check_gradients(build, params) < 1e-4

    def test_stop_gradient_flag(self):
        cfg = ModelConfig(hidden_size=16, num_layers=1, num_heads=2, seq_len=6)
        model = BiddingTransformer(cfg, seed=2)
        head = ValueEstimator(model.store, 16, path="value",
                              stop_backbone_gradient=True)
        h = ad.Tensor(np.random.default_rng(0).normal(size=(3, 16)))
        value_loss(head(h), np.zeros(3)).backward()
        assert h.grad is None


class TestValueLoss:
    def test_zero_when_equal(self):
        p = ad.Tensor([1.0, 2.0])
        assert value_loss(p, np.array([1.0, 2.0])).item() == 0.0

    def test_hand_arithmetic(self):
        p = ad.Tensor([0.0, 0.0])
        assert value_loss(p, np.array([1.0, 3.0])).item() == pytest.approx(5.0)

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeError, match="mismatch"):
            value_loss(ad.Tensor([1.0]), np.array([1.0, 2.0]))

    def test_weight_ramp(self):
        p = ad.Tensor([[0.0, 0.0]])
        target = np.array([[1.0, 1.0]])
        plain = value_loss(p, target).item()
        ramped = value_loss(p, target, weight_ramp=True).item()
        # weights are [1, 1.5], so mean rises from 1.0 to 1.25
        assert plain == pytest.approx(1.0)
        assert ramped == pytest.approx(1.25)


class TestScoreCandidates:
    def setup_method(self):
        cfg = ModelConfig(hidden_size=16, num_layers=1, num_heads=2, seq_len=6)
        self.model = BiddingTransformer(cfg, seed=3)
        self.head = ValueEstimator(self.model.store, 16)
        rng = np.random.default_rng(3)
        self.tokens = [
            TokenInput(rtg=float(10 - t), state=rng.uniform(0, 1, 16),
                       prev_action=float(1 + 0.1 * t), position=t)
            for t in range(4)
        ]

    def test_identical_candidates_identical_scores(self):
        scores = score_candidates(self.model, self.head, self.tokens,
                                  np.array([1.3, 1.3, 1.3]))
        assert scores[0] == scores[1] == scores[2]

    def test_m_finite_scores(self):
        scores = score_candidates(self.model, self.head, self.tokens,
                                  np.array([0.9, 1.0, 1.1, 1.2, 1.3]))
        assert scores.shape == (5,)
        assert np.isfinite(scores).all()

    def test_ranking_invariant_to_constant_shift(self):
        cands = np.array([0.8, 1.0, 1.6, 2.2])
        scores = score_candidates(self.model, self.head, self.tokens, cands)
        shifted = scores + 3.7
        np.testing.assert_array_equal(np.argsort(scores), np.argsort(shifted))
        assert np.argmax(scores) == np.argmax(shifted)

    def test_context_longer_than_window_is_trimmed(self):
        rng = np.random.default_rng(4)
        long_tokens = [
            TokenInput(rtg=1.0, state=rng.uniform(0, 1, 16),
                       prev_action=1.0, position=min(t, 5))
            for t in range(12)
        ]
        scores = score_candidates(self.model, self.head, long_tokens,
                                  np.array([1.0, 2.0]))
        assert scores.shape == (2,)
        assert np.isfinite(scores).all()
