"""Offline dataset pipeline: annotate, filter, realign, merge, subsample, save/load."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .cmdp import ChainEnv, CostBudget, Trajectory, VelocityEnv

log = logging.getLogger(__name__)

FORMAT_VERSION = "b2r-ds-1"
STRATEGIES = ("shift", "avg", "rand", "scale")


class DatasetFormatError(ValueError):
    pass


class StrategyInapplicable(ValueError):
    pass


def _suffix(x: np.ndarray) -> np.ndarray:
    out = kernels.suffix_sum(np.ascontiguousarray(x, dtype=np.float64))
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class AnnotatedTrajectory:
    traj: Trajectory
    rtg: np.ndarray
    ctg: np.ndarray
    kappa_tag: float | None = None

    def __post_init__(self):
        h = self.traj.horizon
        if len(self.rtg) != h or len(self.ctg) != h:
            raise ValueError(f"rtg/ctg length must equal horizon {h}")

    @property
    def horizon(self) -> int:
        return self.traj.horizon

    @property
    def total_return(self) -> float:
        return float(self.rtg[0])

    @property
    def total_cost(self) -> float:
        """C(tau) from the environment costs (never the realigned ctg)."""
        return float(_suffix(self.traj.costs)[0])

    def __eq__(self, other):
        if not isinstance(other, AnnotatedTrajectory):
            return NotImplemented
        return (
            self.traj == other.traj
            and np.array_equal(self.rtg, other.rtg)
            and np.array_equal(self.ctg, other.ctg)
            and self.kappa_tag == other.kappa_tag
        )


def annotate(traj: Trajectory) -> AnnotatedTrajectory:
    return AnnotatedTrajectory(traj, _suffix(traj.rewards), _suffix(traj.costs))


@dataclass
class DatasetManifest:
    env: str = "unknown"
    kappa: float | None = None
    kappas: list | None = None
    strategy: str | None = None
    total: int = 0
    kept: int = 0
    dropped: int = 0
    seed: int | None = None
    fraction: float | None = None
    warnings: list = field(default_factory=list)
    format: str = FORMAT_VERSION

    def __post_init__(self):
        if self.kept + self.dropped != self.total:
            raise ValueError(f"manifest counts inconsistent: kept {self.kept} + dropped {self.dropped} != total {self.total}")


@dataclass
class Dataset:
    records: list
    manifest: DatasetManifest

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @classmethod
    def wrap(cls, data, env: str = "unknown") -> "Dataset":
        if isinstance(data, Dataset):
            return data
        records = list(data)
        return cls(records, DatasetManifest(env=env, total=len(records), kept=len(records)))

    def derived(self, records, **changes) -> "Dataset":
        m = replace(self.manifest, warnings=list(self.manifest.warnings), **changes)
        return Dataset(list(records), m)


# ---------------------------------------------------------------------------
# filtering


def filter_safe(dataset, kappa) -> Dataset:
    """Keep trajectories with C(tau) <= kappa (inclusive)."""
    kappa = float(CostBudget(float(kappa)))
    ds = Dataset.wrap(dataset)
    kept = [at for at in ds if at.total_cost <= kappa]
    out = ds.derived(kept, kappa=kappa, total=len(ds), kept=len(kept), dropped=len(ds) - len(kept))
    if not kept:
        out.manifest.warnings.append(f"filter at kappa={kappa} kept no trajectories")
        log.warning("filter at kappa=%s kept no trajectories", kappa)
    return out


def boundary_band(dataset, kappa: float, epsilon: float) -> Dataset:
    """Trajectories with C(tau) in [kappa - eps, kappa + eps], no realignment."""
    ds = Dataset.wrap(dataset)
    kept = [at for at in ds if kappa - epsilon <= at.total_cost <= kappa + epsilon]
    return ds.derived(kept, kappa=float(kappa), total=len(ds), kept=len(kept), dropped=len(ds) - len(kept))


# ---------------------------------------------------------------------------
# realignment


@dataclass(frozen=True)
class RealignmentSpec:
    strategy: str
    kappa: float
    rng_seed: int = 0
    rand_mode: str = "auto"  # auto | discrete | continuous

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        CostBudget(float(self.kappa))
        if self.rand_mode not in ("auto", "discrete", "continuous"):
            raise ValueError(f"unknown rand_mode {self.rand_mode!r}")

    def offset(self, at: AnnotatedTrajectory) -> float:
        return self.kappa - at.total_cost

    def scale(self, at: AnnotatedTrajectory) -> float:
        c = at.total_cost
        if c == 0:
            raise StrategyInapplicable("scale realignment needs C(tau) > 0")
        return self.kappa / c


def _rand_costs(costs: np.ndarray, kappa: float, delta: float, rng, mode: str) -> tuple[np.ndarray, bool]:
    c = np.array(costs, dtype=np.float64)
    h = len(c)
    if mode == "auto":
        mode = "discrete" if np.all(c == np.round(c)) else "continuous"
    short = False
    if mode == "discrete":
        eligible = rng.permutation(np.flatnonzero(c == 0))
        k = 0
        while delta >= 1.0 and k < len(eligible):
            c[eligible[k]] = 1.0
            delta -= 1.0
            k += 1
        short = delta >= 1.0
    else:
        level = kappa / h
        eligible = rng.permutation(np.flatnonzero(c < level))
        for idx in eligible:
            inc = level - c[idx]
            if inc > delta:
                break
            c[idx] = level
            delta -= inc
    if delta > 0:
        c[-1] += delta
    return c, short


def _realign(at: AnnotatedTrajectory, spec: RealignmentSpec) -> tuple[AnnotatedTrajectory, bool]:
    kappa = float(spec.kappa)
    total = at.total_cost
    if total > kappa:
        raise ValueError(f"trajectory cost {total} exceeds kappa {kappa}; filter first")
    delta = kappa - total
    short = False
    if spec.strategy == "shift":
        ctg = at.ctg + delta
    elif spec.strategy == "avg":
        ctg = _suffix(at.traj.costs + delta / at.horizon)
    elif spec.strategy == "rand":
        if delta == 0:
            ctg = at.ctg
        else:
            rng = np.random.default_rng(spec.rng_seed)
            costs, short = _rand_costs(at.traj.costs, kappa, delta, rng, spec.rand_mode)
            ctg = _suffix(costs)
    else:
        ctg = spec.scale(at) * at.ctg
    ctg = np.array(ctg, dtype=np.float64)
    ctg.flags.writeable = False
    return AnnotatedTrajectory(at.traj, at.rtg, ctg, kappa_tag=kappa), short


def realign(at: AnnotatedTrajectory, spec: RealignmentSpec) -> AnnotatedTrajectory:
    return _realign(at, spec)[0]


def implied_costs(at: AnnotatedTrajectory, strategy: str) -> tuple[np.ndarray, float]:
    """Per-step costs and terminal budget implied by a realigned ctg sequence.

    Shift keeps the environment costs and leaves ``kappa - C(tau)`` as
    terminal budget; the other strategies spend the whole budget.
    """
    if strategy == "shift":
        return np.asarray(at.traj.costs), float(at.ctg[-1] - at.traj.costs[-1])
    ctg = np.asarray(at.ctg)
    c = np.empty_like(ctg)
    c[:-1] = ctg[:-1] - ctg[1:]
    c[-1] = ctg[-1]
    return c, 0.0


def realign_dataset(dataset, spec: RealignmentSpec) -> Dataset:
    ds = Dataset.wrap(dataset)
    out, flagged = [], []
    for i, at in enumerate(ds):
        sub = replace(spec, rng_seed=_child_seed(spec.rng_seed, i))
        r, short = _realign(at, sub)
        out.append(r)
        if short:
            flagged.append(i)
    res = ds.derived(out, strategy=spec.strategy, kappa=float(spec.kappa), total=len(out), kept=len(out), dropped=0)
    if flagged:
        res.manifest.warnings.append(f"rand: residual budget assigned to last step for records {flagged}")
    return res


def _child_seed(seed: int, *idx: int) -> int:
    ss = np.random.SeedSequence([int(seed), *map(int, idx)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def prepare_multi_target(dataset, kappas: Sequence[float], strategy: str = "shift", seed: int = 0) -> Dataset:
    if not kappas:
        raise ValueError("kappas must be non-empty")
    ds = Dataset.wrap(dataset)
    merged, warnings = [], list(ds.manifest.warnings)
    for j, k in enumerate(kappas):
        safe = filter_safe(ds, k)
        if not len(safe):
            warnings.append(f"kappa={float(k)} yields no safe trajectories; skipped")
            continue
        merged.extend(realign_dataset(safe, RealignmentSpec(strategy, float(k), _child_seed(seed, j))).records)
    return Dataset(
        merged,
        replace(
            ds.manifest,
            kappa=None,
            kappas=[float(k) for k in kappas],
            strategy=strategy,
            total=len(merged),
            kept=len(merged),
            dropped=0,
            warnings=warnings,
        ),
    )


def subsample(dataset, fraction: float, seed: int) -> Dataset:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    ds = Dataset.wrap(dataset)
    n = len(ds)
    if fraction == 1.0 or n == 0:
        return ds.derived(ds.records, fraction=fraction)
    k = max(1, int(round(fraction * n)))
    idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return ds.derived([ds[i] for i in idx], fraction=fraction, total=n, kept=k, dropped=n - k)


# ---------------------------------------------------------------------------
# serialization


def manifest_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".manifest.json")


def _record(at: AnnotatedTrajectory) -> dict:
    rec = {
        "states": at.traj.states.tolist(),
        "actions": at.traj.actions.tolist(),
        "rewards": at.traj.rewards.tolist(),
        "costs": at.traj.costs.tolist(),
        "rtg": np.asarray(at.rtg).tolist(),
        "ctg": np.asarray(at.ctg).tolist(),
    }
    if at.kappa_tag is not None:
        rec["kappa_tag"] = at.kappa_tag
    return rec


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for at in ds:
            fh.write(json.dumps(_record(at), separators=(",", ":")))
            fh.write("\n")
    meta = asdict(ds.manifest)
    meta["records"] = len(ds)
    manifest_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = manifest_path(path)
    if not mpath.exists():
        raise DatasetFormatError(f"missing manifest {mpath}")
    meta = json.loads(mpath.read_text(encoding="utf-8"))
    if meta.get("format") != FORMAT_VERSION:
        raise DatasetFormatError(f"format version mismatch: expected {FORMAT_VERSION}, got {meta.get('format')!r}")
    n_expected = meta.pop("records", None)
    records = []
    dims = None
    with path.open(encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                traj = Trajectory(rec["states"], rec["actions"], rec["rewards"], rec["costs"])
                at = AnnotatedTrajectory(
                    traj,
                    _readonly(rec["rtg"]),
                    _readonly(rec["ctg"]),
                    rec.get("kappa_tag"),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"malformed record {i} in {path}: {exc}") from exc
            d = (traj.states.shape[1], traj.actions.shape[1])
            if dims is None:
                dims = d
            elif d != dims:
                raise DatasetFormatError(f"record {i}: dimensions {d} inconsistent with {dims}")
            records.append(at)
    if n_expected is not None and n_expected != len(records):
        raise DatasetFormatError(f"manifest lists {n_expected} records, file has {len(records)}")
    return Dataset(records, DatasetManifest(**meta))


def _readonly(x) -> np.ndarray:
    a = np.array(x, dtype=np.float64).reshape(-1)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# data generation


@dataclass(frozen=True)
class VelocityBehavior:
    """Noisy proportional speed controllers with a two-phase target schedule."""

    target_low: float = 3.0
    target_high: float = 13.0
    gain: float = 0.5
    noise_low: float = 0.05
    noise_high: float = 0.4


def generate_velocity_dataset(n: int, seed: int, env: VelocityEnv | None = None,
                              behavior: VelocityBehavior | None = None) -> Dataset:
    env = env or VelocityEnv()
    b = behavior or VelocityBehavior()
    h = env.max_horizon
    rng = np.random.default_rng(seed)
    t1 = rng.uniform(b.target_low, b.target_high, n)
    t2 = rng.uniform(b.target_low, b.target_high, n)
    switch = rng.integers(0, h + 1, n)
    targets = np.where(np.arange(h)[None, :] < switch[:, None], t1[:, None], t2[:, None])
    noise = rng.normal(size=(n, h)) * rng.uniform(b.noise_low, b.noise_high, n)[:, None]
    vel, act, rew, cost = kernels.velocity_rollouts(
        np.ascontiguousarray(targets), np.ascontiguousarray(noise), b.gain, env.dt, env.v_max, env.v_limit, env.v0
    )
    frac = np.arange(h) / h
    records = []
    for i in range(n):
        states = np.stack([vel[i], frac], axis=1)
        records.append(annotate(Trajectory(states, act[i][:, None], rew[i], cost[i])))
    return Dataset(records, DatasetManifest(env="velocity", total=n, kept=n, seed=seed))


def dataset_env(name: str):
    """The environment instance the generators for ``name`` simulate."""
    if name == "velocity":
        return VelocityEnv()
    if name == "chain":
        return ChainEnv(n_states=5, hazard=frozenset({4}), horizon=8)
    raise ValueError(f"unknown env {name!r}; expected 'velocity' or 'chain'")


def generate_chain_dataset(n: int, seed: int, env: ChainEnv | None = None) -> Dataset:
    env = env or dataset_env("chain")
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        bias = rng.uniform(-0.5, 0.5)
        obs = env.reset()
        rows = []
        done = False
        while not done:
            a = int(np.clip(np.round(rng.normal(bias, 0.8)), -1, 1))
            nxt, r, c, done = env.step(a)
            rows.append((obs, [float(a)], r, c))
            obs = nxt
        states, actions, rewards, costs = zip(*rows)
        records.append(annotate(Trajectory(np.stack(states), actions, rewards, costs)))
    return Dataset(records, DatasetManifest(env="chain", total=n, kept=n, seed=seed))


def generate_dataset(env_name: str, n: int, seed: int) -> Dataset:
    if env_name == "velocity":
        return generate_velocity_dataset(n, seed)
    if env_name == "chain":
        return generate_chain_dataset(n, seed)
    raise ValueError(f"unknown env {env_name!r}")


def cost_summary(ds: Iterable[AnnotatedTrajectory]) -> dict:
    costs = [at.total_cost for at in ds]
    if not costs:
        return {"n": 0}
    return {"n": len(costs), "min": min(costs), "max": max(costs), "mean": math.fsum(costs) / len(costs)}
