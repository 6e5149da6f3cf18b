import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from b2r.cmdp import EnvSpec, VelocityEnv
from b2r.evaluate import (
    EpisodeResult,
    RolloutConfig,
    RolloutError,
    evaluate,
    normalized_cost,
    normalized_reward,
    rollout,
    rollout_batch,
    summarize,
    write_eval,
)
from b2r.model import ModelConfig, Policy

SPEC = EnvSpec("script", 2, 1, (-1.0,), (1.0,), 5.0, 6, 0.0, 10.0)


class ScriptEnv:
    """Fixed per-step costs and rewards; optionally ends early."""

    def __init__(self, costs, rewards=None, done_at=None, state_dim=2):
        self.costs = list(costs)
        self.rewards = list(rewards) if rewards is not None else [1.0] * len(self.costs)
        self.done_at = done_at
        self.state_dim = state_dim
        self.spec = SPEC
        self.t = 0

    def reset(self):
        self.t = 0
        return np.zeros(self.state_dim)

    def step(self, a):
        t = self.t
        self.t += 1
        done = self.t >= len(self.costs) or (self.done_at is not None and t >= self.done_at)
        return np.full(self.state_dim, float(self.t)), self.rewards[t], self.costs[t], done


def policy(seed=0, **kw):
    return Policy(ModelConfig(**{**dict(state_dim=2, action_dim=1, hidden_dim=8, n_heads=2, n_layers=1,
                                       dropout=0.0, context_len=3), **kw}), seed=seed)


def test_ctg_decrement_example():
    ro = rollout(policy(), ScriptEnv([2.0, 1.0, 0.0, 3.0]), RolloutConfig(kappa=10.0, target_return=4.0,
                                                                        action_mode="mean"))
    assert ro.ctg.tolist() == [10.0, 8.0, 7.0, 7.0]
    assert ro.rtg.tolist() == [4.0, 3.0, 2.0, 1.0]
    assert ro.final_ctg == 4.0


def test_negative_ctg_not_clamped():
    ro = rollout(policy(), ScriptEnv([5.0, 5.0, 5.0]), RolloutConfig(kappa=6.0, target_return=0.0,
                                                                   action_mode="mean"))
    assert ro.ctg.tolist() == [6.0, 1.0, -4.0] and ro.final_ctg == -9.0


def test_done_at_first_step():
    ro = rollout(policy(), ScriptEnv([1.0] * 6, done_at=0), RolloutConfig(kappa=3.0, target_return=1.0,
                                                                        action_mode="mean"))
    assert ro.traj.horizon == 1


def test_zero_cost_env_keeps_budget():
    ro = rollout(policy(), ScriptEnv([0.0] * 6), RolloutConfig(kappa=3.5, target_return=1.0,
                                                             action_mode="mean"))
    assert np.all(ro.ctg == 3.5)


@given(st.lists(st.floats(0, 5, allow_nan=False), min_size=1, max_size=6), st.floats(0, 50))
def test_ctg_telescoping(costs, kappa):
    ro = rollout(policy(), ScriptEnv(costs), RolloutConfig(kappa=kappa, target_return=0.0, action_mode="mean"))
    acc = kappa
    for t, c in enumerate(costs):
        assert ro.ctg[t] == acc
        acc = acc - c
    assert ro.final_ctg == acc


def test_rollout_errors():
    with pytest.raises(RolloutError, match="state_dim"):
        rollout(policy(), ScriptEnv([0.0], state_dim=3), RolloutConfig(kappa=1, target_return=0, action_mode="mean"))

    class Broken(ScriptEnv):
        def step(self, a):
            if self.t == 2:
                raise RuntimeError("boom")
            return super().step(a)

    with pytest.raises(RolloutError, match="t=2"):
        rollout(policy(), Broken([0.0] * 5), RolloutConfig(kappa=1, target_return=0, action_mode="mean"))
    with pytest.raises(ValueError):
        RolloutConfig(kappa=-1, target_return=0)
    with pytest.raises(ValueError):
        RolloutConfig(kappa=1, target_return=0, n_episodes=0)


def test_batched_rollouts_match_single():
    pol = policy(seed=2)
    env = VelocityEnv(max_horizon=15)
    cfg = RolloutConfig(kappa=3.0, target_return=10.0)
    envs = [VelocityEnv(max_horizon=15) for _ in range(3)]
    batch = rollout_batch(pol, envs, cfg, [np.random.default_rng(i) for i in range(3)])
    for i in range(3):
        one = rollout(pol, env, cfg, np.random.default_rng(i))
        np.testing.assert_allclose(one.traj.actions, batch[i].traj.actions, rtol=0, atol=1e-12)


def test_normalized_reward_examples():
    assert normalized_reward(10.0, SPEC) == 100.0
    assert normalized_reward(0.0, SPEC) == 0.0
    assert normalized_reward(50.0, r_min=0, r_max=100) == 50.0
    assert normalized_reward(50.0, r_min=0, r_max=100, scale=1.0) == 0.5
    with pytest.raises(ValueError):
        normalized_reward(1.0, r_min=2, r_max=2)


def test_normalized_cost_examples():
    assert normalized_cost(10.0, 10.0) == 1.0
    assert normalized_cost(5.0, 10.0, 0.1) == pytest.approx(5.1 / 10.1, abs=1e-15)
    assert normalized_cost(5.0, 10.0, 0.1) == pytest.approx(0.50495, abs=1e-5)
    assert normalized_cost(0.0, 1e6, 0.1) == pytest.approx(0.1 / 1e6, rel=1e-6)
    with pytest.raises(ValueError):
        normalized_cost(1.0, 1.0, 0.0)


@given(st.floats(0, 1e3), st.floats(1e-6, 10), st.floats(0, 100), st.floats(1e-3, 1))
def test_normalized_cost_increasing(c, dc, kappa, eps):
    assert normalized_cost(c + dc, kappa, eps) > normalized_cost(c, kappa, eps)


def episodes():
    r = np.random.default_rng(0)
    return [EpisodeResult(s, i, float(r.uniform(0, 10)), float(r.uniform(0, 4)), False)
            for s in (0, 1, 2) for i in range(5)]


def test_summary_recomputation():
    eps = episodes()
    for e in eps:
        e.violated = e.cost > 2.0
    s = summarize(eps, 2.0, SPEC)
    rets = [e.ret for e in eps]
    costs = [e.cost for e in eps]
    assert s.reward_mean == pytest.approx(sum(rets) / 15, abs=1e-12)
    assert s.cost_mean == pytest.approx(sum(costs) / 15, abs=1e-12)
    assert s.normalized_cost == pytest.approx((s.cost_mean + 0.1) / 2.1, abs=1e-12)
    assert s.normalized_reward == pytest.approx(s.reward_mean * 10, abs=1e-10)
    assert s.normalized_reward_unit == pytest.approx(s.reward_mean / 10, abs=1e-12)
    assert s.violation_rate == sum(c > 2 for c in costs) / 15
    seed_means = [np.mean(costs[5 * k : 5 * k + 5]) for k in range(3)]
    assert s.cost_std == pytest.approx(np.std(seed_means), abs=1e-12)
    assert s.safe == (s.normalized_cost < 1)


def test_summary_order_invariant():
    eps = episodes()
    a = summarize(eps, 2.0, SPEC).to_dict()
    for k in range(5):
        shuffled = [eps[i] for i in np.random.default_rng(k).permutation(len(eps))]
        assert summarize(shuffled, 2.0, SPEC).to_dict() == a


def test_zero_cost_policy_is_safe():
    env = ScriptEnv([0.0] * 6)
    s = evaluate(policy(), env, RolloutConfig(kappa=4.0, target_return=3.0, n_episodes=3, seeds=(0, 1)))
    assert s.cost_mean == 0.0
    assert s.normalized_cost == pytest.approx(0.1 / 4.1, abs=1e-15) and s.safe
    assert s.violation_rate == 0.0


def test_deterministic_env_mean_mode_zero_std(tmp_path):
    env = VelocityEnv(max_horizon=20)
    cfg = RolloutConfig(kappa=2.0, target_return=15.0, n_episodes=4, seeds=(0, 1), action_mode="mean")
    s = evaluate(policy(seed=1), env, cfg)
    assert len({e.ret for e in s.episodes}) == 1
    assert s.reward_std == 0.0
    again = evaluate(policy(seed=1), env, RolloutConfig(kappa=2.0, target_return=15.0, n_episodes=4,
                                                        seeds=(0, 1)))
    assert 0 <= again.violation_rate <= 1 and again.normalized_cost >= 0
    write_eval(again, tmp_path / "e.json", tmp_path / "e.csv", extra={"method": "x"})
    d = json.loads((tmp_path / "e.json").read_text())
    assert d["method"] == "x" and len(d["episodes"]) == 8
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "episode,seed,return,cost,violated" and len(rows) == 9
    assert math.isclose(float(rows[1].split(",")[2]), again.episodes[0].ret)
