"""Deployment rollouts with decremented return/cost tokens, and summary metrics."""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cmdp import EnvSpec, Trajectory
from .model import Batch, Policy

DEFAULT_EPS = 0.1


@dataclass
class RolloutConfig:
    kappa: float
    target_return: float
    max_horizon: int | None = None
    n_episodes: int = 20
    seeds: tuple = (0, 1, 2)
    action_mode: str = "sample"
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        if self.action_mode not in ("mean", "sample"):
            raise ValueError(f"action_mode must be 'mean' or 'sample', got {self.action_mode!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        self.seeds = tuple(int(s) for s in self.seeds)


@dataclass
class Rollout:
    traj: Trajectory
    rtg: np.ndarray  # token fed at each step
    ctg: np.ndarray  # token fed at each step; ctg[t] = kappa - sum(c[:t])
    final_ctg: float


class RolloutError(RuntimeError):
    pass


def rollout_batch(policy: Policy, envs, config: RolloutConfig, rngs=None) -> list[Rollout]:
    """Run one episode per env in lockstep, one batched forward pass per step.

    The cost token is decremented by realised cost and passed on unclamped,
    including below zero.
    """
    n = len(envs)
    K = policy.config.context_len
    S, A = policy.config.state_dim, policy.config.action_dim
    horizon = config.max_horizon or min(e.spec.max_horizon for e in envs)
    if config.action_mode == "sample" and rngs is None:
        raise ValueError("sample mode needs one rng per env")

    obs = np.stack([np.asarray(e.reset(), dtype=np.float64) for e in envs])
    if obs.shape[1] != S:
        raise RolloutError(f"env observation dim {obs.shape[1]} does not match policy state_dim {S}")
    states = np.zeros((n, horizon, S))
    actions = np.zeros((n, horizon, A))
    rewards = np.zeros((n, horizon))
    costs = np.zeros((n, horizon))
    rtg = np.zeros((n, horizon))
    ctg = np.zeros((n, horizon))
    r_hat = np.full(n, float(config.target_return))
    c_hat = np.full(n, float(config.kappa))
    length = np.full(n, horizon)
    alive = np.ones(n, dtype=bool)
    lo, hi = np.asarray(policy.config.action_low), np.asarray(policy.config.action_high)

    for t in range(horizon):
        states[:, t] = obs
        rtg[:, t] = r_hat
        ctg[:, t] = c_hat
        s0 = max(0, t - K + 1)
        pad_n = K - (t - s0 + 1)
        b = Batch(
            rtg=np.zeros((n, K)),
            ctg=np.zeros((n, K)),
            states=np.zeros((n, K, S)),
            actions=np.zeros((n, K, A)),
            pad=np.broadcast_to(np.arange(K) < pad_n, (n, K)).copy(),
        )
        b.rtg[:, pad_n:] = rtg[:, s0 : t + 1]
        b.ctg[:, pad_n:] = ctg[:, s0 : t + 1]
        b.states[:, pad_n:] = states[:, s0 : t + 1]
        b.actions[:, pad_n:] = actions[:, s0 : t + 1]  # slot t is still zero: placeholder
        mu, log_std = policy.predict(b)
        if config.action_mode == "sample":
            noise = np.stack([r.standard_normal(A) for r in rngs])
            mu = mu + np.exp(log_std) * noise
        act = np.clip(mu, lo, hi)
        for i in np.flatnonzero(alive):
            try:
                nxt, r, c, done = envs[i].step(act[i])
            except Exception as e:
                raise RolloutError(f"env step failed at t={t} in episode {i}: {e}") from e
            actions[i, t] = act[i]
            rewards[i, t] = r
            costs[i, t] = c
            r_hat[i] -= r
            c_hat[i] -= c
            obs[i] = nxt
            if done:
                alive[i] = False
                length[i] = t + 1
        if not alive.any():
            break

    out = []
    for i in range(n):
        h = int(length[i])
        traj = Trajectory(states[i, :h], actions[i, :h], rewards[i, :h], costs[i, :h])
        out.append(Rollout(traj, rtg[i, :h].copy(), ctg[i, :h].copy(), float(c_hat[i])))
    return out


def rollout(policy: Policy, env, config: RolloutConfig, rng: np.random.Generator | None = None) -> Rollout:
    return rollout_batch(policy, [env], config, None if rng is None else [rng])[0]


# ---------------------------------------------------------------------------
# metrics


def normalized_reward(R_pi: float, env_spec: EnvSpec | None = None, r_min: float | None = None,
                      r_max: float | None = None, scale: float = 100.0) -> float:
    """(R - r_min) / (r_max - r_min) * scale; pass scale=1 for the unit scale."""
    lo = env_spec.reward_min if r_min is None else r_min
    hi = env_spec.reward_max if r_max is None else r_max
    if hi == lo:
        raise ValueError("r_max equals r_min; normalized reward undefined")
    return (R_pi - lo) / (hi - lo) * scale


def normalized_cost(C_pi: float, kappa: float, eps: float = DEFAULT_EPS) -> float:
    if not eps > 0:
        raise ValueError("eps must be positive")
    return (C_pi + eps) / (kappa + eps)


@dataclass
class EpisodeResult:
    seed: int
    episode: int
    ret: float
    cost: float
    violated: bool


@dataclass
class EvalSummary:
    kappa: float
    epsilon: float
    episodes: list = field(default_factory=list)
    reward_mean: float = 0.0
    reward_std: float = 0.0
    cost_mean: float = 0.0
    cost_std: float = 0.0
    normalized_reward: float = 0.0  # x100
    normalized_reward_std: float = 0.0
    normalized_reward_unit: float = 0.0  # x1
    normalized_cost: float = 0.0
    normalized_cost_std: float = 0.0
    violation_rate: float = 0.0
    safe: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["episodes"] = [asdict(e) for e in self.episodes]
        return d


def _mean(xs) -> float:
    return math.fsum(xs) / len(xs)


def _std(xs) -> float:
    m = _mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / len(xs))


def summarize(episodes, kappa: float, env_spec: EnvSpec, epsilon: float = DEFAULT_EPS) -> EvalSummary:
    """Aggregate per-episode results; std is across per-seed means.

    Sums use fsum over sorted values, so the result does not depend on
    episode order.
    """
    episodes = sorted(episodes, key=lambda e: (e.seed, e.episode))
    if not episodes:
        raise ValueError("no episodes to summarise")
    by_seed = {}
    for e in episodes:
        by_seed.setdefault(e.seed, []).append(e)
    seed_r = [_mean(sorted(e.ret for e in v)) for v in by_seed.values()]
    seed_c = [_mean(sorted(e.cost for e in v)) for v in by_seed.values()]
    r = _mean(sorted(e.ret for e in episodes))
    c = _mean(sorted(e.cost for e in episodes))
    nr = [normalized_reward(x, env_spec) for x in seed_r]
    nc = [normalized_cost(x, kappa, epsilon) for x in seed_c]
    ncost = normalized_cost(c, kappa, epsilon)
    return EvalSummary(
        kappa=float(kappa),
        epsilon=float(epsilon),
        episodes=episodes,
        reward_mean=r,
        reward_std=_std(seed_r),
        cost_mean=c,
        cost_std=_std(seed_c),
        normalized_reward=normalized_reward(r, env_spec),
        normalized_reward_std=_std(nr),
        normalized_reward_unit=normalized_reward(r, env_spec, scale=1.0),
        normalized_cost=ncost,
        normalized_cost_std=_std(nc),
        violation_rate=sum(e.violated for e in episodes) / len(episodes),
        safe=bool(ncost < 1.0),
    )


def evaluate(policy: Policy, env, config: RolloutConfig) -> EvalSummary:
    """Roll out ``n_episodes`` per seed; episode i of seed s samples from rng (s, i)."""
    results = []
    for s in config.seeds:
        envs = [copy.deepcopy(env) for _ in range(config.n_episodes)]
        rngs = [np.random.default_rng([s, i]) for i in range(config.n_episodes)]
        for i, ro in enumerate(rollout_batch(policy, envs, config, rngs)):
            cost = float(np.sum(ro.traj.costs))
            results.append(
                EpisodeResult(s, i, float(np.sum(ro.traj.rewards)), cost, bool(cost > config.kappa))
            )
    return summarize(results, config.kappa, env.spec, config.epsilon)


def write_eval(summary: EvalSummary, json_path, csv_path=None, extra: dict | None = None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    d = summary.to_dict()
    if extra:
        d.update(extra)
    json_path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is not None:
        with Path(csv_path).open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["episode", "seed", "return", "cost", "violated"])
            for e in summary.episodes:
                w.writerow([e.episode, e.seed, repr(e.ret), repr(e.cost), int(e.violated)])
