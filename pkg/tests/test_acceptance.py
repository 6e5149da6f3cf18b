"""Acceptance gate: one PASS/FAIL line per criterion, printed even under capture."""

import math
import time

import numpy as np
import pytest

from b2r import autodiff as ad
from b2r import data as D
from b2r.cli import main
from b2r.cmdp import Trajectory, VelocityEnv
from b2r.evaluate import RolloutConfig, evaluate
from b2r.model import ModelConfig, Policy, stack_windows, tokenize
from b2r.theory import TheoryConfig, assumption1_audit, simulate_theorem1, verify_theorem2
from b2r.trainer import TrainConfig, train, train_boundary_baseline

from conftest import run_pipeline


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} | {detail}", flush=True)
    return emit


def _random_traj(rng, h, integer_costs):
    costs = rng.integers(0, 2, h).astype(float) if integer_costs else rng.uniform(0, 1, h)
    if costs.sum() == 0:
        costs[rng.integers(h)] = 1.0  # scale needs C > 0
    return Trajectory(rng.normal(size=(h, 3)), rng.uniform(-1, 1, (h, 2)), rng.normal(size=h), costs)


def test_1_realignment_invariants(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    failures = []
    for strategy in ("shift", "avg", "rand", "scale"):
        for i in range(1000):
            h = int(rng.integers(1, 60))
            at = D.annotate(_random_traj(rng, h, integer_costs=bool(i % 2)))
            kappa = at.total_cost + float(rng.uniform(0, 10)) * (i % 5 != 0)
            r = D.realign(at, D.RealignmentSpec(strategy, kappa, rng_seed=i))
            ctg = np.asarray(r.ctg)
            ok = abs(ctg[0] - kappa) <= 1e-9
            ok &= r.rtg is at.rtg or np.array_equal(r.rtg, at.rtg)
            ok &= r.traj.states.tobytes() == at.traj.states.tobytes()
            ok &= r.traj.actions.tobytes() == at.traj.actions.tobytes()
            ok &= bool(np.all(np.diff(ctg) <= 0))
            if strategy in ("avg", "rand"):
                c, _ = D.implied_costs(r, strategy)
                ok &= abs(math.fsum(c) - kappa) <= 1e-9
            if not ok:
                failures.append((strategy, i))
    dt = time.perf_counter() - t0
    ok = not failures and dt < 10
    report(1, ok, f"4x1000 trajectories, {len(failures)} invariant failures, {dt:.2f}s (limit 10s)")
    assert ok, failures[:5]


def test_2_theorem2_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    bad = 0
    for _ in range(10_000):
        n = int(rng.integers(0, 15))
        pairs = list(zip(rng.normal(0, 10, n), rng.uniform(0, 10, n)))
        bad += not verify_theorem2(pairs, float(rng.uniform(0, 10)), float(rng.uniform(0.01, 5))).holds
    ex = verify_theorem2([(10, 4), (8, 5), (12, 7)], 5.0, 0.5)
    dt = time.perf_counter() - t0
    ok = bad == 0 and (ex.region_max, ex.boundary_max, ex.holds) == (10, 8, True) and dt < 30
    report(2, ok, f"10^4 random datasets, {bad} failures; example region {ex.region_max} boundary "
                  f"{ex.boundary_max}; {dt:.2f}s (limit 30s)")
    assert ok


GRID_CONFIGS = [
    # sigma, delta, c_max, H, kappa
    (0.01, 2.0, 1.0, 100, 10.0),
    (0.001, 0.5, 1.0, 50, 5.0),
    (0.02, 3.0, 1.0, 100, 10.0),
    (0.05, 4.0, 0.5, 40, 8.0),
    (0.1, 5.0, 2.0, 20, 25.0),
    (0.005, 1.0, 1.0, 150, 20.0),
    (0.03, 1.5, 0.25, 40, 4.0),
    (0.2, 2.5, 1.0, 10, 3.0),
    (0.015, 6.0, 1.0, 300, 40.0),
    (0.04, 2.2, 1.0, 50, 6.5),
]


def test_3_theorem1_monte_carlo(report):
    t0 = time.perf_counter()
    rows = []
    for i, (s, d, cm, h, k) in enumerate(GRID_CONFIGS):
        r = simulate_theorem1(TheoryConfig(s, d, cm, h, k, n_trials=100_000, seed=i))
        rows.append((r.prob_clause_ok and r.expectation_clause_ok and r.telescoping_exact, r))
    dt = time.perf_counter() - t0
    ok = all(x for x, _ in rows) and dt < 300
    worst = max(r.violation_rate - (1 - r.prob_bound) for _, r in rows)
    report(3, ok, f"{len(rows)} configs x 10^5 trials, {sum(x for x, _ in rows)} pass both clauses; "
                  f"max (viol - allowed) {worst:.3g}; {dt:.1f}s (limit 300s)")
    assert ok, [r.config for x, r in rows if not x]


def test_4_gradient_fidelity(report):
    t0 = time.perf_counter()
    cfg = ModelConfig(state_dim=3, action_dim=2, hidden_dim=16, n_heads=2, n_layers=2, dropout=0.0,
                      context_len=4, action_low=(-1, -1), action_high=(1, 1))
    pol = Policy(cfg, seed=0)
    rng = np.random.default_rng(0)
    for p in pol.params.values():  # move off the symmetric init so every path carries gradient
        p.data += rng.normal(scale=0.05, size=p.data.shape)
    recs = [D.realign(D.annotate(_random_traj(rng, 6, False)), D.RealignmentSpec("shift", 10.0)) for _ in range(2)]
    batch = stack_windows([tokenize(recs[0], 1, 4), tokenize(recs[0], 5, 4), tokenize(recs[1], 0, 4),
                           tokenize(recs[1], 3, 4)])
    rep = ad.gradient_check(lambda: pol.nll(batch), list(pol.params.values()), h=1e-5, tol=1e-4, floor=1e-6)
    dt = time.perf_counter() - t0
    ok = rep.max_rel_error < 1e-4 and dt < 120
    report(4, ok, f"{rep.n_checked} coordinates, max rel error {rep.max_rel_error:.2e} (limit 1e-4); "
                  f"{dt:.1f}s (limit 120s)")
    assert ok, rep.failures[:5]


def test_5_rope_relativity(report):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        q, k = rng.normal(size=(1, 32)), rng.normal(size=(1, 32))
        p1, p2 = rng.integers(0, 500, 2)
        shift = int(rng.integers(-p1.clip(max=p2), 500))
        a = (ad.apply_rope(ad.Tensor(q), [p1]).data @ ad.apply_rope(ad.Tensor(k), [p2]).data.T).item()
        b = (ad.apply_rope(ad.Tensor(q), [p1 + shift]).data @ ad.apply_rope(ad.Tensor(k), [p2 + shift]).data.T).item()
        worst = max(worst, abs(a - b))
    x = rng.normal(size=(4, 1, 16))
    ident = np.array_equal(ad.apply_rope(ad.Tensor(x), [0]).data, x)
    ok = worst <= 1e-9 and ident
    report(5, ok, f"100 tuples, max |<q,k> difference| {worst:.2e} (limit 1e-9); position-0 identity exact: {ident}")
    assert ok


KAPPA6 = 20.0
C6_MODEL = dict(hidden_dim=64, n_heads=4, n_layers=2, dropout=0.1, context_len=3)
C6_TRAIN = dict(learning_rate=1e-3, batch_size=16, steps_per_epoch=5000, epochs=10, seed=0)


@pytest.mark.slow
def test_6_velocity_behavioral_reproduction(report, capsys):
    t0 = time.perf_counter()
    ds = D.generate_velocity_dataset(2000, 0)
    safe = D.filter_safe(ds, KAPPA6)
    aligned = D.realign_dataset(safe, D.RealignmentSpec("shift", KAPPA6))
    mc = ModelConfig(state_dim=2, action_dim=1, **C6_MODEL)
    tc = TrainConfig(**C6_TRAIN)
    b2r = train(aligned, mc, tc).policy
    band = train_boundary_baseline(ds, KAPPA6, 2.0, mc, tc).policy
    r0 = max(at.total_return for at in safe)
    env = VelocityEnv()
    res = {}
    for mode in ("sample", "mean"):
        cfg = RolloutConfig(kappa=KAPPA6, target_return=r0, n_episodes=20, seeds=(0, 1, 2), action_mode=mode)
        res[mode] = (evaluate(b2r, env, cfg), evaluate(band, env, cfg))
    dt = time.perf_counter() - t0
    s_b2r, s_band = res["sample"]
    ok = s_b2r.normalized_cost < 1 and s_b2r.violation_rate < s_band.violation_rate and dt < 1800
    m_b2r, m_band = res["mean"]
    with capsys.disabled():
        print(f"\n  info (mean-action rollouts): B2R ncost {m_b2r.normalized_cost:.3f} viol {m_b2r.violation_rate:.3f}"
              f" | band ncost {m_band.normalized_cost:.3f} viol {m_band.violation_rate:.3f}")
    report(6, ok, f"sampled actions, 20 episodes x 3 seeds: B2R ncost {s_b2r.normalized_cost:.3f} "
                  f"viol {s_b2r.violation_rate:.3f} reward {s_b2r.normalized_reward:.1f}; band ncost "
                  f"{s_band.normalized_cost:.3f} viol {s_band.violation_rate:.3f} reward "
                  f"{s_band.normalized_reward:.1f}; {dt / 60:.1f} min (limit 30)")
    assert ok


def test_7_pipeline_determinism(report, tmp_path):
    a = run_pipeline(tmp_path / "a", seed=3)
    b = run_pipeline(tmp_path / "b", seed=3)
    keys = ("raw", "safe", "aligned", "ckpt", "band", "eval", "band_eval", "report")
    same = {k: a[k].read_bytes() == b[k].read_bytes() for k in keys}
    same["manifest"] = D.manifest_path(a["aligned"]).read_bytes() == D.manifest_path(b["aligned"]).read_bytes()
    ok = all(same.values())
    report(7, ok, f"two seeded CLI runs, byte-identical: {sorted(k for k, v in same.items() if v)}; "
                  f"differing: {sorted(k for k, v in same.items() if not v)}")
    assert ok


def test_8_alignment_audit(report, tmp_path):
    p = run_pipeline(tmp_path / "run", seed=0)
    extra = {}
    for name, argv in {
        "rand": ["--strategy", "rand", "--kappa", "20"],
        "multi": ["--strategy", "shift", "--kappas", "10", "20", "30"],
    }.items():
        out = tmp_path / f"{name}.jsonl"
        assert main(["realign", "--data", str(p["raw"] if name == "multi" else p["safe"]), *argv,
                     "--seed", "4", "--out", str(out)]) == 0
        extra[name] = out
    outcomes = {"shift": assumption1_audit(D.load_dataset(p["aligned"])).ok}
    outcomes.update({k: assumption1_audit(D.load_dataset(v)).ok for k, v in extra.items()})

    ds = D.load_dataset(p["aligned"])
    recs = list(ds)
    v = recs[len(recs) // 2]
    ctg = np.array(v.ctg)
    ctg[37] += 0.1
    recs[len(recs) // 2] = D.AnnotatedTrajectory(v.traj, v.rtg, ctg, v.kappa_tag)
    tampered = assumption1_audit(D.Dataset(recs, ds.manifest))
    located = (tampered.index, tampered.t) == (len(recs) // 2, 37)
    ok = all(outcomes.values()) and not tampered.ok and located
    report(8, ok, f"audits pass {outcomes}; tampered ctg flagged at record {tampered.index}, t={tampered.t} "
                  f"({tampered.clause})")
    assert ok
