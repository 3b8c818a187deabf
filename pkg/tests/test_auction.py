import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autobid.auction import (
    AuctionOutcome,
    DistributionSpec,
    EpisodeConfig,
    ImpressionOpportunity,
    InvalidActionError,
    StepAggregate,
    StepState,
    compute_bid,
    featurize_state,
    run_episode,
    run_step,
)
from autobid.trajectories import compute_rtg, read_trajectories, write_trajectories


def make_config(**overrides):
    base = dict(budget=150.0, cpc_limit=0.8, num_steps=48,
                impressions_per_step=50, seed=0)
    base.update(overrides)
    return EpisodeConfig(**base)


def opp(value=0.5, pctr=None, competitor=0.4, t=0):
    return ImpressionOpportunity(value, value if pctr is None else pctr,
                                 competitor, t)


class TestComputeBid:
    def test_identity_coefficient(self):
        assert compute_bid(1.0, opp(value=0.5)) == 0.5

    def test_hand_example(self):
        assert compute_bid(2.5, opp(value=0.4)) == pytest.approx(1.0)

    def test_tiny_coef_loses_positive_competitors(self):
        o = opp(value=1.0, competitor=0.01)
        assert compute_bid(1e-300, o) < o.competitor_bid

    @pytest.mark.parametrize("coef", [0.0, -1.0, float("nan"), float("inf")])
    def test_invalid_coefficient_rejected(self, coef):
        with pytest.raises(ValueError, match="invalid coefficient"):
            compute_bid(coef, opp())


class TestRunStep:
    def test_second_price_rule(self):
        rng = np.random.default_rng(0)
        outcomes, _ = run_step(1.2, [opp(value=0.5, competitor=0.5)], 10.0, rng)
        assert outcomes[0].won and outcomes[0].cost == 0.5

    def test_budget_gate_forfeits(self):
        rng = np.random.default_rng(0)
        outcomes, reward = run_step(1.2, [opp(value=0.5, competitor=0.5)], 0.3, rng)
        assert not outcomes[0].won
        assert outcomes[0].cost == 0.0
        assert reward == 0.0

    def test_reward_is_sum_of_won_values(self):
        rng = np.random.default_rng(0)
        opps = [opp(value=v, competitor=0.0001) for v in (0.2, 0.3, 0.1)]
        outcomes, reward = run_step(5.0, opps, 100.0, rng)
        assert all(o.won for o in outcomes)
        assert reward == pytest.approx(0.6)

    def test_tie_bid_loses(self):
        rng = np.random.default_rng(0)
        outcomes, _ = run_step(1.0, [opp(value=0.5, competitor=0.5)], 10.0, rng)
        assert not outcomes[0].won

    def test_increasing_bid_never_decreases_wins_or_changes_cost(self):
        o = opp(value=0.5, competitor=0.3)
        rng = np.random.default_rng(1)
        low, _ = run_step(0.7, [o], 10.0, rng)
        rng = np.random.default_rng(1)
        high, _ = run_step(2.0, [o], 10.0, rng)
        assert high[0].won >= low[0].won
        if low[0].won and high[0].won:
            assert low[0].cost == high[0].cost


class TestFeaturize:
    def test_episode_start(self):
        cfg = make_config()
        s = featurize_state(0, cfg, 0.0, 0, 0.0, [], 0.0)
        f = s.features
        assert f[0] == 0.0 and f[1] == 1.0 and f[2] == 1.0 and f[4] == 0.0
        assert f[15] == 1.0

    def test_on_pace_velocity(self):
        cfg = make_config()
        t = cfg.num_steps // 2
        s = featurize_state(t, cfg, cfg.budget / 2, 0, 0.0, [], 1.0)
        assert s.features[3] == pytest.approx(1.0)

    def test_full_snapshot_recomputed_by_hand(self):
        cfg = make_config(budget=100.0, cpc_limit=2.0, num_steps=10,
                          impressions_per_step=4, action_ceiling=5.0,
                          value_scale=20.0)
        recent = [
            StepAggregate(wins=2, opportunities=4, cost=1.0, value=0.8, reward=0.8, action=1.0),
            StepAggregate(wins=1, opportunities=4, cost=0.5, value=0.3, reward=0.3, action=1.2),
            StepAggregate(wins=3, opportunities=4, cost=2.5, value=1.5, reward=1.5, action=0.9),
        ]
        s = featurize_state(4, cfg, spent=10.0, clicks=5, value_so_far=4.0,
                            recent=recent, prev_action=0.9)
        f = s.features
        assert f[0] == pytest.approx(0.4)
        assert f[1] == pytest.approx(0.6)
        assert f[2] == pytest.approx(0.9)
        assert f[3] == pytest.approx(10.0 / (100.0 * 0.4))          # 0.25
        assert f[4] == pytest.approx((10.0 / 5) / 2.0)              # 1.0
        assert f[5] == pytest.approx(3 / 4)
        assert f[6] == pytest.approx(2.5 / 3)
        assert f[7] == pytest.approx(1.5 / 3)
        assert f[8] == pytest.approx(1.5)
        assert f[9] == pytest.approx(6 / 12)
        assert f[10] == pytest.approx(4.0 / 6)
        assert f[11] == pytest.approx(2.6 / 6)
        assert f[12] == pytest.approx(2.6 / 3)
        assert f[13] == pytest.approx(0.9 / 5.0)
        assert f[14] == pytest.approx(4.0 / 20.0)
        assert f[15] == 1.0

    def test_out_of_range_step_rejected(self):
        cfg = make_config()
        with pytest.raises(ValueError, match="out of range"):
            featurize_state(cfg.num_steps, cfg, 0.0, 0, 0.0, [], 0.0)

    def test_ratio_features_capped(self):
        cfg = make_config(budget=100.0)
        s = featurize_state(1, cfg, spent=99.0, clicks=1, value_so_far=0.0,
                            recent=[], prev_action=0.0)
        assert s.features[3] == 1.5
        assert s.features[4] == 1.5


class TestRunEpisode:
    def test_tiny_coef_wins_nothing(self):
        cfg = make_config(num_steps=8, impressions_per_step=10)
        result = run_episode(lambda s, h: 1e-9, cfg)
        assert result.total_value == 0.0
        assert result.total_cost == 0.0

    def test_huge_coef_respects_budget(self):
        cfg = make_config(budget=5.0, num_steps=8, impressions_per_step=10)
        result = run_episode(lambda s, h: 1e6, cfg)
        assert result.total_cost <= cfg.budget
        assert result.total_cost > 0.0

    def test_determinism(self):
        cfg = make_config(num_steps=6, impressions_per_step=20)
        a = run_episode(lambda s, h: 1.0, cfg, episode_id=3)
        b = run_episode(lambda s, h: 1.0, cfg, episode_id=3)
        np.testing.assert_array_equal(a.trajectory.states, b.trajectory.states)
        np.testing.assert_array_equal(a.per_step_rewards, b.per_step_rewards)
        assert a.total_cost == b.total_cost and a.total_clicks == b.total_clicks

    def test_different_episode_ids_differ(self):
        cfg = make_config(num_steps=6, impressions_per_step=20)
        a = run_episode(lambda s, h: 1.0, cfg, episode_id=0)
        b = run_episode(lambda s, h: 1.0, cfg, episode_id=1)
        assert not np.array_equal(a.per_step_rewards, b.per_step_rewards)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -1.0, 0.0])
    def test_invalid_action_aborts(self, bad):
        cfg = make_config(num_steps=4, impressions_per_step=5)
        with pytest.raises(InvalidActionError, match="invalid action"):
            run_episode(lambda s, h: bad, cfg)

    def test_reward_telescoping(self):
        cfg = make_config(num_steps=10, impressions_per_step=30)
        result = run_episode(lambda s, h: 1.2, cfg)
        assert result.per_step_rewards.sum() == result.total_value
        rtg = result.trajectory.rtg
        rewards = result.trajectory.rewards
        for t in range(len(rewards) - 1):
            assert rtg[t] == rtg[t + 1] + rewards[t]

    def test_realized_cpc_uses_clicks_floor(self):
        cfg = make_config(num_steps=4, impressions_per_step=5)
        result = run_episode(lambda s, h: 1e-9, cfg)
        assert result.realized_cpc == 0.0


@given(seed=st.integers(0, 2**32 - 1), coef=st.floats(0.1, 8.0),
       budget=st.floats(0.5, 40.0))
@settings(max_examples=60, deadline=None)
def test_budget_safety_property(seed, coef, budget):
    cfg = EpisodeConfig(budget=budget, cpc_limit=1.0, num_steps=6,
                        impressions_per_step=15, seed=seed)
    result = run_episode(lambda s, h: coef, cfg)
    assert result.total_cost <= budget  # exact, never by tolerance


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_states_always_well_formed(seed):
    cfg = EpisodeConfig(budget=20.0, cpc_limit=0.5, num_steps=8,
                        impressions_per_step=10, seed=seed)
    rng = np.random.default_rng(seed)
    coefs = rng.uniform(0.2, 4.0, size=cfg.num_steps)
    result = run_episode(lambda s, h: coefs[len(h)], cfg)
    for t in range(cfg.num_steps):
        StepState(result.trajectory.states[t])  # validates on construction


class TestTrajectoryIO:
    def test_roundtrip_bitwise(self, tmp_path):
        cfg = make_config(num_steps=6, impressions_per_step=10)
        trajs = [run_episode(lambda s, h: 1.0, cfg, episode_id=i).trajectory
                 for i in range(3)]
        path = tmp_path / "trajectories.jsonl"
        write_trajectories(trajs, path)
        back = read_trajectories(path)
        assert len(back) == 3
        for a, b in zip(trajs, back):
            assert a.episode_id == b.episode_id
            np.testing.assert_array_equal(a.states, b.states)
            np.testing.assert_array_equal(a.actions, b.actions)
            np.testing.assert_array_equal(a.rewards, b.rewards)
            np.testing.assert_array_equal(a.rtg, b.rtg)
            assert a.config.to_dict() == b.config.to_dict()

    def test_record_field_order(self, tmp_path):
        cfg = make_config(num_steps=4, impressions_per_step=5)
        traj = run_episode(lambda s, h: 1.0, cfg).trajectory
        record = traj.to_record()
        assert list(record) == ["episode_id", "config", "steps"]
        assert list(record["steps"][0]) == ["t", "state", "action", "reward", "rtg"]
        assert len(record["steps"][0]["state"]) == 16


class TestComputeRtg:
    def test_suffix_sums(self):
        np.testing.assert_array_equal(compute_rtg([1.0, 2.0, 3.0]), [6.0, 5.0, 3.0])

    def test_zeros(self):
        np.testing.assert_array_equal(compute_rtg([0.0, 0.0]), [0.0, 0.0])

    def test_single_step(self):
        np.testing.assert_array_equal(compute_rtg([4.5]), [4.5])


class TestDomainTypes:
    def test_outcome_invariant(self):
        with pytest.raises(ValueError):
            AuctionOutcome(won=False, cost=1.0, clicked=False)
        with pytest.raises(ValueError):
            AuctionOutcome(won=False, cost=0.0, clicked=True)

    def test_opportunity_bounds(self):
        with pytest.raises(ValueError):
            ImpressionOpportunity(1.5, 0.5, 0.1, 0)
        with pytest.raises(ValueError):
            ImpressionOpportunity(0.5, -0.1, 0.1, 0)
        with pytest.raises(ValueError):
            ImpressionOpportunity(0.5, 0.5, -0.1, 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            make_config(budget=0.0)
        with pytest.raises(ValueError):
            make_config(cpc_limit=-1.0)

    def test_distribution_roundtrip(self):
        spec = DistributionSpec("uniform", {"low": 0.1, "high": 0.9})
        assert DistributionSpec.from_dict(spec.to_dict()) == spec
        with pytest.raises(ValueError, match="unknown distribution"):
            DistributionSpec("zipf", {}).sample(np.random.default_rng(0), 3)
