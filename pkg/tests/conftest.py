import numpy as np
import pytest
from hypothesis import settings

from b2r.cmdp import Trajectory
from b2r.data import Dataset, annotate

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def make_traj(costs, rewards=None, state_dim=2, action_dim=1, seed=0):
    costs = np.asarray(costs, dtype=float)
    h = len(costs)
    rng = np.random.default_rng(seed)
    rewards = rng.uniform(0, 1, h) if rewards is None else np.asarray(rewards, dtype=float)
    return Trajectory(rng.normal(size=(h, state_dim)), rng.uniform(-1, 1, (h, action_dim)), rewards, costs)


def fixture_dataset(pairs, horizon=5):
    """One trajectory per (return, cost) pair, spread evenly over the horizon."""
    recs = []
    for i, (r, c) in enumerate(pairs):
        recs.append(annotate(make_traj(np.full(horizon, c / horizon), np.full(horizon, r / horizon), seed=i)))
    return Dataset.wrap(recs, env="velocity")


@pytest.fixture
def three_traj():
    # integer costs 3, 5, 7 on a length-7 horizon
    recs = []
    for i, c in enumerate((3, 5, 7)):
        costs = np.zeros(7)
        costs[:c] = 1.0
        recs.append(annotate(make_traj(costs, seed=i)))
    return Dataset.wrap(recs, env="velocity")


TINY_TRAIN = ["--hidden-dim", "16", "--n-layers", "1", "--n-heads", "2", "--epochs", "1",
              "--steps-per-epoch", "20", "--batch-size", "8"]


def run_pipeline(root, seed=0, n=60, kappa=20.0):
    """Drive the CLI end to end on a small velocity dataset; returns the artifact paths."""
    from b2r.cli import main

    root.mkdir(parents=True, exist_ok=True)
    p = {k: root / v for k, v in dict(raw="raw.jsonl", safe="safe.jsonl", aligned="aligned.jsonl",
                                      ckpt="b2r.ckpt", band="band.ckpt", eval="eval.json",
                                      band_eval="band_eval.json", report="report.csv").items()}
    k = str(kappa)
    steps = [
        ["gen-data", "--env", "velocity", "--n", str(n), "--seed", str(seed), "--out", p["raw"]],
        ["filter", "--data", p["raw"], "--kappa", k, "--out", p["safe"]],
        ["realign", "--data", p["safe"], "--strategy", "shift", "--kappa", k, "--out", p["aligned"]],
        ["train", "--data", p["aligned"], "--seed", str(seed), "--out", p["ckpt"], *TINY_TRAIN],
        ["train-boundary", "--data", p["raw"], "--kappa", k, "--epsilon", "5", "--seed", str(seed),
         "--out", p["band"], *TINY_TRAIN],
        ["eval", "--ckpt", p["ckpt"], "--kappa", k, "--data", p["raw"], "--episodes", "2", "--seeds", "0", "1",
         "--method", "b2r", "--out", p["eval"]],
        ["eval", "--ckpt", p["band"], "--kappa", k, "--data", p["raw"], "--episodes", "2", "--seeds", "0", "1",
         "--method", "band", "--out", p["band_eval"]],
        ["report", "--evals", p["eval"], p["band_eval"], "--out", p["report"]],
    ]
    for argv in steps:
        code = main([str(a) for a in argv])
        assert code == 0, (argv[0], code)
    return p
