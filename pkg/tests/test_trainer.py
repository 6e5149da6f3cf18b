import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from b2r import trainer as T
from b2r.data import Dataset, RealignmentSpec, annotate, filter_safe, generate_dataset, realign_dataset
from b2r.model import ModelConfig, Policy
from b2r.trainer import (
    AdamW,
    PreconditionError,
    TrainConfig,
    TrainingDiverged,
    clip_grad_norm,
    global_grad_norm,
    sample_batch,
    sample_pairs,
    train,
    train_boundary_baseline,
)

from conftest import make_traj

MC = dict(state_dim=2, action_dim=1, hidden_dim=16, n_heads=2, n_layers=1, dropout=0.1, context_len=3)


def prepared(ds, kappa):
    return realign_dataset(filter_safe(ds, kappa), RealignmentSpec("shift", kappa))


def quick(**kw):
    base = dict(learning_rate=1e-3, batch_size=8, steps_per_epoch=10, epochs=1, seed=0)
    return TrainConfig(**{**base, **kw})


def test_sample_batch_singleton():
    at = annotate(make_traj([0.5]))
    ds = realign_dataset(Dataset.wrap([at]), RealignmentSpec("shift", 1.0))
    b = sample_batch(ds, 1, 4, 0)
    assert b.pad.tolist() == [[True, True, True, False]]
    assert np.array_equal(b.actions[0, -1], at.traj.actions[0])
    assert b.ctg[0, -1] == 1.0


def test_sample_batch_deterministic(three_traj):
    a = sample_batch(three_traj, 32, 3, 5)
    b = sample_batch(three_traj, 32, 3, 5)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.pad, b.pad)
    with pytest.raises(ValueError, match="empty"):
        sample_pairs(np.array([], dtype=np.int64), 4, np.random.default_rng(0))


def test_sample_pairs_uniform_chi_square():
    lengths = np.array([3, 10, 1, 6])
    n = 100_000
    traj, t = sample_pairs(lengths, n, np.random.default_rng(0))
    flat = (np.cumsum(lengths) - lengths)[traj] + t
    counts = np.bincount(flat, minlength=lengths.sum())
    k = lengths.sum()
    chi2 = float(((counts - n / k) ** 2 / (n / k)).sum())
    dof = k - 1
    assert abs(chi2 - dof) <= 3 * math.sqrt(2 * dof)
    assert np.all(t < lengths[traj]) and np.all(t >= 0)


def test_zero_epochs_leaves_params(three_traj):
    ds = prepared(three_traj, 7.0)
    rep = train(ds, ModelConfig(**MC), quick(epochs=0))
    fresh = Policy(ModelConfig(**MC), seed=0).state_dict()
    assert rep.steps == 0 and rep.losses.size == 0
    for k, v in fresh.items():
        assert np.array_equal(rep.params[k], v)


def test_clip_injected_gradient():
    pol = Policy(ModelConfig(**MC))
    params = list(pol.params.values())
    rng = np.random.default_rng(0)
    for p in params:
        p.grad = rng.normal(size=p.data.shape)
    s = 10.0 / global_grad_norm(params)
    for p in params:
        p.grad *= s
    assert global_grad_norm(params) == pytest.approx(10.0, rel=1e-12)
    g_before = {k: p.grad.copy() for k, p in pol.params.items()}
    assert clip_grad_norm(params, 0.25) == pytest.approx(10.0, rel=1e-12)
    assert global_grad_norm(params) == pytest.approx(0.25, rel=1e-12)
    opt = AdamW(pol.params, 1e-3)
    opt.step()
    m_norm = math.sqrt(sum(float(np.vdot(m, m)) for m in opt.m.values()))
    assert m_norm / (1 - opt.b1) == pytest.approx(0.25, rel=1e-12)
    for k, p in pol.params.items():
        np.testing.assert_allclose(p.grad, g_before[k] * 0.025, rtol=1e-12)
    assert clip_grad_norm(params, 1.0) == pytest.approx(0.25)  # under the limit: untouched


def test_adamw_decay_matrices_only():
    from b2r.autodiff import Tensor

    w, b = Tensor(np.ones((2, 2)), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
    AdamW({"w": w, "b": b}, lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(w.data, 0.95)
    np.testing.assert_allclose(b.data, 1.0)


def test_single_trajectory_overfit():
    at = annotate(make_traj(np.zeros(12), seed=4))
    ds = realign_dataset(Dataset.wrap([at]), RealignmentSpec("shift", 1.0))
    rep = train(ds, ModelConfig(**{**MC, "dropout": 0.0, "hidden_dim": 32, "n_heads": 4}),
                quick(steps_per_epoch=800, learning_rate=3e-3, batch_size=12, grad_clip_norm=1.0))
    assert rep.losses[-20:].mean() < rep.losses[0] - 1.0


def test_preconditions(three_traj):
    with pytest.raises(PreconditionError, match="budget tag"):
        train(three_traj, ModelConfig(**MC), quick())
    over = realign_dataset(filter_safe(three_traj, 7.0), RealignmentSpec("shift", 7.0))
    recs = list(over)
    bad = type(recs[0])(recs[0].traj, recs[0].rtg, np.asarray(recs[0].ctg) + 1.0, recs[0].kappa_tag)
    with pytest.raises(PreconditionError, match="ctg\\[0\\]"):
        train(Dataset.wrap([bad] + recs[1:]), ModelConfig(**MC), quick())
    with pytest.raises(ValueError):
        TrainConfig(grad_clip_norm=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)


def test_nonfinite_loss_aborts_with_step(three_traj, monkeypatch):
    ds = prepared(three_traj, 7.0)
    real = Policy.nll
    calls = {"n": 0}

    def flaky(self, batch, rng=None):
        out = real(self, batch, rng)
        calls["n"] += 1
        if calls["n"] == 4:
            out.data = np.array(np.nan)
        return out

    monkeypatch.setattr(Policy, "nll", flaky)
    with pytest.raises(TrainingDiverged, match="step 3") as ei:
        train(ds, ModelConfig(**MC), quick())
    assert ei.value.step == 3


def test_boundary_baseline_band_membership(three_traj, monkeypatch):
    seen = {}
    real = T._fit

    def spy(records, *a, **k):
        seen["costs"] = sorted(r.total_cost for r in records)
        seen["ctg0"] = [float(r.ctg[0]) for r in records]
        return real(records, *a, **k)

    monkeypatch.setattr(T, "_fit", spy)
    train_boundary_baseline(three_traj, 5.0, 0.5, ModelConfig(**MC), quick())
    assert seen["costs"] == [5.0]
    assert seen["ctg0"] == [5.0]  # raw ctg, no realignment


def test_boundary_baseline_infinite_band_equals_unfiltered(three_traj):
    a = train_boundary_baseline(three_traj, 5.0, math.inf, ModelConfig(**MC), quick())
    b = T._fit(list(three_traj), ModelConfig(**MC), quick(), 5.0)
    assert np.array_equal(a.losses, b.losses)


def test_boundary_baseline_errors(three_traj):
    with pytest.raises(ValueError, match=r"epsilon=0\.1.*kappa=4"):
        train_boundary_baseline(three_traj, 4.0, 0.1, ModelConfig(**MC), quick())
    with pytest.raises(ValueError):
        train_boundary_baseline(three_traj, 5.0, 0.0, ModelConfig(**MC), quick())


@given(st.lists(st.integers(0, 20), min_size=1, max_size=15), st.integers(0, 20), st.integers(1, 20))
def test_band_subset_of_region(costs, kappa, eps):
    from b2r.data import boundary_band

    eps = min(eps, kappa) if kappa else eps
    ds = Dataset.wrap([annotate(make_traj([float(c)], seed=i)) for i, c in enumerate(costs)])
    band = {id(r.traj) for r in boundary_band(ds, kappa, eps) if r.total_cost <= kappa}
    region = {id(r.traj) for r in filter_safe(ds, kappa)}
    assert band <= region


def test_reproducible_and_loss_csv(tmp_path, three_traj):
    ds = prepared(three_traj, 7.0)
    a = train(ds, ModelConfig(**MC), quick(epochs=2), checkpoint=tmp_path / "a.ckpt", loss_csv=tmp_path / "a.csv")
    b = train(ds, ModelConfig(**MC), quick(epochs=2), checkpoint=tmp_path / "b.ckpt", loss_csv=tmp_path / "b.csv")
    assert np.array_equal(a.losses, b.losses) and len(a.losses) == 20
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 21
    assert float(lines[5].split(",")[1]) == a.losses[4]
    c = train(ds, ModelConfig(**MC), quick(epochs=2, seed=1))
    assert not np.array_equal(a.losses, c.losses)


def test_epoch_loss_trend_on_toy_env():
    ds = prepared(generate_dataset("chain", 200, 0), 2.0)
    cfg = quick(epochs=6, steps_per_epoch=40, learning_rate=3e-3, batch_size=16)
    mc = ModelConfig(**{**MC, "state_dim": ds[0].traj.states.shape[1], "action_dim": ds[0].traj.actions.shape[1]})
    rep = train(ds, mc, cfg)
    ep = rep.losses.reshape(6, 40).mean(axis=1)
    rises = int(np.sum(np.diff(ep) > 0))
    assert rises <= 1 and ep[-1] < ep[0]


def test_early_stopping_restores_best(three_traj):
    ds = prepared(three_traj, 7.0)
    scores = iter([3.0, 1.0, 0.5, 0.2, 9.0])
    snaps = []

    def eval_fn(pol):
        snaps.append(pol.state_dict())
        return next(scores)

    rep = train(ds, ModelConfig(**MC), quick(epochs=5, eval_every=1, patience=3), eval_fn=eval_fn)
    assert rep.stopped_early and len(rep.eval_history) == 4
    for k, v in snaps[0].items():
        assert np.array_equal(rep.params[k], v)
