"""Numerical checks of the budget-conditioning guarantees.

* a closed-form safety bound for a budget process whose per-step cost
  predictions err by at most ``sigma`` in mean absolute value, plus a Monte
  Carlo harness that simulates the process;
* the region-versus-band reward comparison by enumeration;
* an audit of realigned datasets against the alignment conditions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import AnnotatedTrajectory, Dataset, dataset_env, implied_costs

GRID = 2.0**-32


class AssumptionViolation(ValueError):
    pass


@dataclass
class TheoryConfig:
    """``delta`` is the safety margin; ``epsilon`` is the band half-width for the reward comparison.

    ``plan_total`` is the planned cumulative cost sum(c_hat_t), spread evenly
    over the horizon; it defaults to ``kappa - delta``.
    """

    sigma: float
    delta: float
    c_max: float
    horizon: int
    kappa: float
    n_trials: int = 100_000
    seed: int = 0
    epsilon: float = 0.5
    plan_total: float | None = None

    def __post_init__(self):
        if self.sigma < 0 or not math.isfinite(self.sigma):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        if self.horizon < 1 or self.n_trials < 1:
            raise ValueError("horizon and n_trials must be >= 1")
        if not self.c_max > 0:
            raise ValueError(f"c_max must be positive, got {self.c_max}")
        if self.sigma * self.horizon >= self.delta:
            raise AssumptionViolation(
                f"sigma*H = {self.sigma * self.horizon} must be below delta = {self.delta}"
            )
        if self.delta > self.kappa:
            raise ValueError(f"delta {self.delta} exceeds kappa {self.kappa}")
        if self.plan_total is None:
            self.plan_total = self.kappa - self.delta
        if self.plan_total < 0 or self.plan_total > self.kappa - self.delta / 2:
            raise AssumptionViolation(
                f"planned total {self.plan_total} must lie in [0, kappa - delta/2 = {self.kappa - self.delta / 2}]"
            )
        if self.plan_total / self.horizon > self.c_max:
            raise ValueError("planned per-step cost exceeds c_max")

    @property
    def half_width(self) -> float:
        # uniform on [-a, a] has E|e| = a/2
        return 2.0 * self.sigma


def theorem1_bound(config: TheoryConfig) -> tuple[float, float]:
    """(lower bound on Pr[C <= kappa], upper bound on E[C])."""
    margin = config.delta - config.sigma * config.horizon
    if margin <= 0:
        raise AssumptionViolation(f"margin delta - sigma*H = {margin} is not positive")
    expo = margin * margin / (2.0 * config.horizon * config.c_max**2)
    return -math.expm1(-expo), config.kappa - margin


def planned_costs(config: TheoryConfig) -> np.ndarray:
    """Even split of the plan, rounded down onto the cost grid."""
    return np.full(config.horizon, math.floor(config.plan_total / config.horizon / GRID) * GRID)


def error_paths(config: TheoryConfig, n_trials: int | None = None) -> dict:
    """Per-step view of the simulated process for the first ``n_trials`` trials.

    Uses the same counter-based uniforms as the fast kernel, so the totals
    match ``simulate_theorem1`` trial for trial. ``D`` is the cumulative
    realised error and ``ctg`` the budget token after each step.
    """
    n = config.n_trials if n_trials is None else n_trials
    u = kernels.counter_uniforms(config.seed, n, config.horizon)
    plan = planned_costs(config)
    e = np.clip((2.0 * u - 1.0) * config.half_width, -config.c_max, config.c_max)
    c = np.clip(plan + e, 0.0, config.c_max)
    c = np.floor(c / GRID + 0.5) * GRID
    ctg = np.empty_like(c)
    acc = np.full(n, float(config.kappa))
    for t in range(config.horizon):
        acc = acc - c[:, t]
        ctg[:, t] = acc
    return {"planned": plan, "cost": c, "error": c - plan, "D": np.cumsum(c - plan, axis=1), "ctg": ctg}


@dataclass
class Theorem1Report:
    config: dict
    prob_bound: float
    expected_bound: float
    safe_rate: float
    violation_rate: float
    binomial_se: float
    mean_cost: float
    sem: float
    realized_abs_error: float
    max_abs_cum_error: float
    telescoping_exact: bool
    prob_clause_ok: bool
    expectation_clause_ok: bool
    notes: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.prob_clause_ok and self.expectation_clause_ok and self.telescoping_exact

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d


def simulate_theorem1(config: TheoryConfig) -> Theorem1Report:
    """Monte Carlo over independent budget processes.

    Realised cost is the planned cost plus a zero-mean uniform error with
    E|e| = sigma, clipped to [0, c_max] and snapped to a 2**-32 grid so the
    budget identity C = kappa - ctg_H is checked exactly.
    """
    prob, exp_bound = theorem1_bound(config)
    n = config.n_trials
    total, final_ctg, cum_err, abs_err = kernels.budget_paths(
        planned_costs(config), config.half_width, config.c_max, config.kappa, config.seed, n
    )
    viol = float(np.count_nonzero(total > config.kappa)) / n
    allowed = 1.0 - prob
    se = math.sqrt(allowed * (1.0 - allowed) / n)  # binomial SE at the bound's rate
    mean = math.fsum(total.tolist()) / n
    sem = float(np.std(total)) / math.sqrt(n)
    notes = []
    if config.kappa % GRID:
        notes.append("kappa is off the 2**-32 grid; the budget identity is checked to rounding only")
        telescoping = bool(np.allclose(total, config.kappa - final_ctg, rtol=0, atol=1e-9 * max(1.0, config.kappa)))
    else:
        telescoping = bool(np.array_equal(total, config.kappa - final_ctg))
    realized = float(abs_err.mean()) / config.horizon
    if config.sigma > 0 and abs(realized - config.sigma) > 0.05 * config.sigma:
        notes.append(f"clipping moved the realised mean abs error to {realized:.6g} (nominal {config.sigma:.6g})")
    return Theorem1Report(
        config=asdict(config),
        prob_bound=prob,
        expected_bound=exp_bound,
        safe_rate=1.0 - viol,
        violation_rate=viol,
        binomial_se=se,
        mean_cost=mean,
        sem=sem,
        realized_abs_error=realized,
        max_abs_cum_error=float(np.max(np.abs(cum_err))),
        telescoping_exact=telescoping,
        prob_clause_ok=viol <= allowed + 3 * se,
        expectation_clause_ok=mean <= exp_bound + 3 * sem,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# region versus band


@dataclass
class Theorem2Result:
    region_max: float
    boundary_max: float
    holds: bool
    n_region: int
    n_boundary: int
    note: str = ""


def _pairs(dataset):
    for x in dataset:
        if isinstance(x, AnnotatedTrajectory):
            yield x.total_return, x.total_cost
        else:
            r, c = x
            yield float(r), float(c)


def verify_theorem2(dataset, kappa: float, epsilon: float) -> Theorem2Result:
    """Best return over {C <= kappa} against the best over the band [kappa-eps, kappa+eps] within it.

    Empty sets count as -inf.
    """
    pairs = list(_pairs(dataset))
    region = [r for r, c in pairs if c <= kappa]
    band = [r for r, c in pairs if c <= kappa and kappa - epsilon <= c <= kappa + epsilon]
    rmax = max(region, default=-math.inf)
    bmax = max(band, default=-math.inf)
    note = "region set is empty; holds vacuously" if not region else ""
    return Theorem2Result(rmax, bmax, rmax >= bmax, len(region), len(band), note)


# ---------------------------------------------------------------------------
# alignment audit


@dataclass
class AuditResult:
    ok: bool
    index: int | None = None
    t: int | None = None
    clause: str = ""
    detail: str = ""
    warnings: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def _env_c_max(env_name: str) -> float | None:
    try:
        return float(dataset_env(env_name).spec.c_max)
    except ValueError:
        return None


def assumption1_audit(dataset, c_max: float | None = None, strategy: str | None = None,
                      atol: float = 1e-9) -> AuditResult:
    """Check every record: ctg[0] equals its budget, ctg steps down by the implied cost,
    implied costs lie in [0, c_max], and they relate to the environment costs as the
    realignment strategy prescribes. Returns the first violation.
    """
    ds = Dataset.wrap(dataset)
    strategy = strategy or ds.manifest.strategy or "shift"
    warnings = []
    if c_max is None:
        c_max = _env_c_max(ds.manifest.env)
        if c_max is None:
            c_max = math.inf
            warnings.append(f"no c_max known for env {ds.manifest.env!r}; upper cost bound not checked")
    if not len(ds):
        return AuditResult(True, warnings=warnings + ["empty dataset: audit passes vacuously"])

    for i, at in enumerate(ds):
        k = at.kappa_tag if at.kappa_tag is not None else ds.manifest.kappa
        if k is None:
            return AuditResult(False, i, None, "budget", "record has no budget tag", warnings)
        tol = atol * max(1.0, abs(k))
        ctg = np.asarray(at.ctg)
        if abs(ctg[0] - k) > tol:
            return AuditResult(False, i, 0, "initial", f"ctg[0] = {ctg[0]!r} != kappa {k!r}", warnings)
        c, terminal = implied_costs(at, strategy)
        step = ctg[:-1] - c[:-1] - ctg[1:]
        bad = np.flatnonzero(np.abs(step) > tol)
        if bad.size:
            t = int(bad[0])
            return AuditResult(False, i, t + 1, "recursion",
                               f"ctg[{t + 1}] = {ctg[t + 1]!r} but ctg[{t}] - c[{t}] = {ctg[t] - c[t]!r}", warnings)
        if terminal < -tol:
            return AuditResult(False, i, at.horizon - 1, "recursion", f"terminal budget {terminal!r} < 0", warnings)
        out = np.flatnonzero((c < -tol) | (c > c_max + tol))
        if out.size:
            t = int(out[0])
            return AuditResult(False, i, t, "bounds", f"implied cost {c[t]!r} outside [0, {c_max}]", warnings)
        t = _strategy_mismatch(at, c, k, strategy, tol)
        if t is not None:
            return AuditResult(False, i, t, "strategy", f"implied cost at t={t} inconsistent with {strategy}", warnings)
    return AuditResult(True, warnings=warnings)


def _strategy_mismatch(at: AnnotatedTrajectory, c: np.ndarray, kappa: float, strategy: str, tol: float):
    env = np.asarray(at.traj.costs)
    if strategy == "shift":
        return None  # implied costs are the environment costs
    if strategy == "avg":
        d = c - env
        bad = np.flatnonzero(np.abs(d - (kappa - at.total_cost) / at.horizon) > tol)
    elif strategy == "scale":
        a = kappa / at.total_cost if at.total_cost > 0 else math.nan
        bad = np.flatnonzero(np.abs(c - a * env) > tol)
    elif strategy == "rand":
        bad = np.flatnonzero(c < env - tol)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return int(bad[0]) if bad.size else None


def write_report(obj, path) -> None:
    d = obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(d, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(x):
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not serialisable: {type(x)}")
