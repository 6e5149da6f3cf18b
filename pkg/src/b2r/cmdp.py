"""CMDP value types, trajectory accounting and the two toy environments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels


class BoundsError(ValueError):
    """Action outside the environment's action space."""


def _frozen(x, ndim: int) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == ndim - 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != ndim:
        raise ValueError(f"expected {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    cost: float


@dataclass(frozen=True)
class CostBudget:
    kappa: float

    def __post_init__(self):
        if not (self.kappa >= 0 and math.isfinite(self.kappa)):
            raise ValueError(f"cost budget must be finite and >= 0, got {self.kappa}")

    def __float__(self) -> float:
        return float(self.kappa)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ordered transitions stored column-wise.

    ``states`` has shape (H, state_dim), ``actions`` (H, action_dim),
    ``rewards`` and ``costs`` shape (H,). Arrays are read-only.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states, 2))
        object.__setattr__(self, "actions", _frozen(self.actions, 2))
        rewards = np.array(self.rewards, dtype=np.float64).reshape(-1)
        costs = np.array(self.costs, dtype=np.float64).reshape(-1)
        rewards.flags.writeable = False
        costs.flags.writeable = False
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "costs", costs)
        h = len(rewards)
        if h < 1:
            raise ValueError("trajectory must contain at least one transition")
        lengths = {len(self.states), len(self.actions), h, len(costs)}
        if len(lengths) != 1:
            raise ValueError(
                f"inconsistent lengths: states {len(self.states)}, actions {len(self.actions)}, "
                f"rewards {h}, costs {len(costs)}"
            )
        if np.any(costs < 0):
            raise ValueError("costs must be nonnegative")

    @classmethod
    def from_transitions(cls, transitions: Iterable[Transition]) -> "Trajectory":
        ts = list(transitions)
        if not ts:
            raise ValueError("trajectory must contain at least one transition")
        return cls(
            states=np.stack([np.atleast_1d(t.state) for t in ts]),
            actions=np.stack([np.atleast_1d(t.action) for t in ts]),
            rewards=[t.reward for t in ts],
            costs=[t.cost for t in ts],
        )

    @property
    def horizon(self) -> int:
        return len(self.rewards)

    def __len__(self) -> int:
        return self.horizon

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[t], self.actions[t], float(self.rewards[t]), float(self.costs[t]))
            for t in range(self.horizon)
        ]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("states", "actions", "rewards", "costs")
        )


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: tuple
    action_high: tuple
    c_max: float
    max_horizon: int
    reward_min: float
    reward_max: float

    def __post_init__(self):
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("action bounds must have action_dim entries")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action_low must be < action_high elementwise")
        if not self.c_max > 0:
            raise ValueError("c_max must be positive")


def _total(x: np.ndarray) -> float:
    # same summation order as the suffix sums, so C(tau) == ctg[0] bit for bit
    return float(kernels.suffix_sum(np.ascontiguousarray(x))[0])


def cumulative_return(traj: Trajectory) -> float:
    return _total(traj.rewards)


def cumulative_cost(traj: Trajectory) -> float:
    return _total(traj.costs)


# ---------------------------------------------------------------------------
# velocity environment


def velocity_kinematics(v: float, a: float, dt: float, v_max: float) -> float:
    nv = v + a * dt
    return min(max(nv, 0.0), v_max)


@dataclass
class VelocityEnv:
    """1-D car: accelerate to earn speed, pay one cost unit per step above ``v_limit``.

    Observation is ``[v, t / max_horizon]``; the second entry lets a policy
    with purely relative position encoding know how much episode remains.
    """

    dt: float = 0.1
    v_max: float = 15.0
    v_limit: float = 10.0
    max_horizon: int = 200
    v0: float = 0.0
    v: float = field(default=0.0, init=False)
    t: int = field(default=0, init=False)

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(
            name="velocity",
            state_dim=2,
            action_dim=1,
            action_low=(-1.0,),
            action_high=(1.0,),
            c_max=1.0,
            max_horizon=self.max_horizon,
            reward_min=0.0,
            reward_max=self.max_return(),
        )

    def max_return(self) -> float:
        v, total = self.v0, 0.0
        for _ in range(self.max_horizon):
            v = velocity_kinematics(v, 1.0, self.dt, self.v_max)
            total += v * self.dt
        return total

    def observe(self) -> np.ndarray:
        return np.array([self.v, self.t / self.max_horizon])

    def reset(self) -> np.ndarray:
        self.v = self.v0
        self.t = 0
        return self.observe()

    def step(self, action) -> tuple[np.ndarray, float, float, bool]:
        a = float(np.asarray(action, dtype=np.float64).reshape(-1)[0])
        if not -1.0 <= a <= 1.0:
            raise BoundsError(f"acceleration {a} outside [-1, 1]")
        if self.t >= self.max_horizon:
            raise RuntimeError("step() called after episode end; call reset()")
        self.v = velocity_kinematics(self.v, a, self.dt, self.v_max)
        self.t += 1
        reward = self.v * self.dt
        cost = 1.0 if self.v > self.v_limit else 0.0
        return self.observe(), reward, cost, self.t >= self.max_horizon


def velocity_env_step(state, action, env: VelocityEnv | None = None):
    """Stateless step from an observation ``[v, t/H]``."""
    env = env or VelocityEnv()
    state = np.asarray(state, dtype=np.float64)
    sim = VelocityEnv(env.dt, env.v_max, env.v_limit, env.max_horizon, env.v0)
    sim.v = float(state[0])
    sim.t = int(round(float(state[1]) * env.max_horizon)) if state.size > 1 else 0
    return sim.step(action)


# ---------------------------------------------------------------------------
# chain environment

CHAIN_ACTIONS = {"left": -1, "stay": 0, "right": 1}


@dataclass
class ChainEnv:
    """Deterministic walk on ``{0..n_states-1}``.

    Reward is ``next_state / n_states``; cost is 1 while the agent occupies
    a hazard state. Actions are ``left``/``stay``/``right`` (or -1/0/1, or a
    1-vector in [-1, 1] split into thirds).
    """

    n_states: int = 5
    hazard: frozenset = frozenset()
    horizon: int = 4
    start: int = 0
    s: int = field(default=0, init=False)
    t: int = field(default=0, init=False)

    def __post_init__(self):
        self.hazard = frozenset(self.hazard)
        if any(not 0 <= h < self.n_states for h in self.hazard):
            raise ValueError("hazard states out of range")

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(
            name="chain",
            state_dim=1,
            action_dim=1,
            action_low=(-1.0,),
            action_high=(1.0,),
            c_max=1.0,
            max_horizon=self.horizon,
            reward_min=0.0,
            reward_max=float(self.horizon * (self.n_states - 1)) / self.n_states,
        )

    def reset(self) -> np.ndarray:
        self.s = self.start
        self.t = 0
        return np.array([float(self.s)])

    @staticmethod
    def decode(action) -> int:
        if isinstance(action, str):
            if action not in CHAIN_ACTIONS:
                raise ValueError(f"invalid chain action {action!r}; expected one of {sorted(CHAIN_ACTIONS)}")
            return CHAIN_ACTIONS[action]
        if isinstance(action, (int, np.integer)) and not isinstance(action, bool):
            if action not in (-1, 0, 1):
                raise ValueError(f"invalid chain action {action!r}")
            return int(action)
        a = float(np.asarray(action, dtype=np.float64).reshape(-1)[0])
        if not -1.0 <= a <= 1.0:
            raise BoundsError(f"chain action {a} outside [-1, 1]")
        return -1 if a < -1 / 3 else (1 if a > 1 / 3 else 0)

    def step(self, action) -> tuple[np.ndarray, float, float, bool]:
        move = self.decode(action)
        cost = 1.0 if self.s in self.hazard else 0.0
        self.s = min(max(self.s + move, 0), self.n_states - 1)
        self.t += 1
        reward = self.s / self.n_states
        return np.array([float(self.s)]), reward, cost, self.t >= self.horizon


def chain_env_step(state, action, n_states: int = 5, hazard: Sequence[int] = (), horizon: int = 4, t: int = 0):
    env = ChainEnv(n_states=n_states, hazard=frozenset(hazard), horizon=horizon)
    s = int(np.asarray(state).reshape(-1)[0])
    if not 0 <= s < n_states:
        raise ValueError(f"state {s} outside 0..{n_states - 1}")
    env.s, env.t = s, t
    return env.step(action)


def make_env(name: str, **kwargs):
    if name == "velocity":
        return VelocityEnv(**kwargs)
    if name == "chain":
        return ChainEnv(**kwargs)
    raise ValueError(f"unknown env {name!r}; expected 'velocity' or 'chain'")


def run_episode(env, policy, max_steps: int | None = None) -> Trajectory:
    """Roll ``policy(obs, t) -> action`` until done; record pre-step observations."""
    obs = env.reset()
    rows = []
    t = 0
    while True:
        a = policy(obs, t)
        nxt, r, c, done = env.step(a)
        if isinstance(a, str):
            a = float(CHAIN_ACTIONS[a])
        rows.append(Transition(obs, np.atleast_1d(np.asarray(a, dtype=np.float64)), r, c))
        obs = nxt
        t += 1
        if done or (max_steps is not None and t >= max_steps):
            break
    return Trajectory.from_transitions(rows)
