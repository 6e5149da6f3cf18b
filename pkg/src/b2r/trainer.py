"""Behavior-cloning loop: AdamW on the Gaussian NLL of dataset actions."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, boundary_band
from .model import Batch, ModelConfig, Policy, TokenNorm, WindowIndex


class PreconditionError(ValueError):
    """Training data is not filtered and realigned to its budget."""


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str = "non-finite loss"):
        super().__init__(f"{detail} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    grad_clip_norm: float = 0.25
    steps_per_epoch: int = 500
    epochs: int = 20
    seed: int = 0
    weight_decay: float = 1e-4
    eval_every: int = 0  # epochs between early-stopping evaluations, 0 = never
    patience: int = 3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch_size and steps_per_epoch must be >= 1")
        if not self.grad_clip_norm > 0:
            raise ValueError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")
        if self.epochs < 0 or self.eval_every < 0 or self.weight_decay < 0 or self.patience < 1:
            raise ValueError("epochs, eval_every and weight_decay must be >= 0; patience >= 1")
        self.betas = tuple(float(b) for b in self.betas)


@dataclass
class TrainReport:
    losses: np.ndarray
    params: dict
    wall_time: float
    seed: int
    policy: Policy
    grad_norms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eval_history: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def steps(self) -> int:
        return len(self.losses)


# ---------------------------------------------------------------------------
# batches


def _lengths(records) -> np.ndarray:
    return np.array([at.horizon for at in records], dtype=np.int64)


def sample_pairs(lengths, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform draws over all (trajectory, timestep) pairs."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size == 0 or lengths.sum() == 0:
        raise ValueError("cannot sample from an empty dataset")
    ends = np.cumsum(lengths)
    flat = rng.integers(0, ends[-1], size=batch_size)
    traj = np.searchsorted(ends, flat, side="right")
    starts = ends - lengths
    return traj, flat - starts[traj]


def sample_batch(dataset, batch_size: int, K: int, seed) -> Batch:
    """Windows ending at uniformly drawn (trajectory, timestep) pairs.

    ``seed`` may be an int or a Generator. Each window's last action is
    the supervised target.
    """
    records = list(Dataset.wrap(dataset))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    traj, t = sample_pairs(_lengths(records), batch_size, rng)
    return WindowIndex(records, K).gather(traj, t)


# ---------------------------------------------------------------------------
# optimizer


def global_grad_norm(params) -> float:
    sq = [float(np.vdot(p.grad, p.grad)) for p in params if p.grad is not None]
    return math.sqrt(math.fsum(sq))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm:
        s = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return norm


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# training


def check_aligned(dataset, atol: float = 1e-9) -> None:
    """Every record must satisfy C(tau) <= kappa and ctg[0] = kappa for its own budget tag."""
    for i, at in enumerate(dataset):
        k = at.kappa_tag
        if k is None:
            raise PreconditionError(f"record {i} carries no budget tag; realign the dataset before training")
        if abs(float(at.ctg[0]) - k) > atol * max(1.0, abs(k)):
            raise PreconditionError(f"record {i}: ctg[0] = {float(at.ctg[0])!r} but budget is {k!r}")
        if at.total_cost > k:
            raise PreconditionError(f"record {i}: cost {at.total_cost!r} exceeds budget {k!r}; filter first")


def _write_loss_csv(path, losses) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def _fit(records, model_config: ModelConfig, cfg: TrainConfig, ctg_scale: float, checkpoint=None, loss_csv=None,
         eval_fn: Callable[[Policy], float] | None = None, log: Callable[[str], None] | None = None) -> TrainReport:
    if not records:
        raise ValueError("cannot train on an empty dataset")
    t0 = time.perf_counter()
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    batch_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    policy = Policy(model_config, TokenNorm.fit(records, ctg_scale), seed=cfg.seed)
    params = policy.params
    plist = list(params.values())
    opt = AdamW(params, cfg.learning_rate, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    index = WindowIndex(records, model_config.context_len)
    lengths = index.lengths

    losses, norms, history = [], [], []
    best, best_state, bad, stopped = -math.inf, None, 0, False
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            batch = index.gather(*sample_pairs(lengths, cfg.batch_size, batch_rng))
            for p in plist:
                p.grad = None
            try:
                loss = policy.nll(batch, drop_rng)
            except FloatingPointError as e:
                raise TrainingDiverged(step, str(e)) from None
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(step)
            loss.backward()
            norms.append(clip_grad_norm(plist, cfg.grad_clip_norm))
            opt.step()
            losses.append(value)
            step += 1
        if log:
            recent = losses[-cfg.steps_per_epoch:]
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {np.mean(recent):.4f}")
        if eval_fn is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            score = float(eval_fn(policy))
            history.append((epoch + 1, score))
            if score > best:
                best, best_state, bad = score, policy.state_dict(), 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    stopped = True
                    break
    if stopped and best_state is not None:
        policy.load_state_dict(best_state)

    if checkpoint is not None:
        Path(checkpoint).parent.mkdir(parents=True, exist_ok=True)
        policy.save(checkpoint)
    if loss_csv is not None:
        _write_loss_csv(loss_csv, losses)
    return TrainReport(
        losses=np.array(losses),
        params=policy.state_dict(),
        wall_time=time.perf_counter() - t0,
        seed=cfg.seed,
        policy=policy,
        grad_norms=np.array(norms),
        eval_history=history,
        stopped_early=stopped,
    )


def train(dataset, model_config: ModelConfig, train_config: TrainConfig, checkpoint=None, loss_csv=None,
          eval_fn=None, log=None) -> TrainReport:
    """Fit the policy on a filtered, realigned dataset.

    CTG tokens are scaled by the largest budget present so that multi-budget
    datasets share one scale.
    """
    records = list(Dataset.wrap(dataset))
    check_aligned(records)
    scale = max((at.kappa_tag for at in records), default=1.0)
    return _fit(records, model_config, train_config, scale, checkpoint, loss_csv, eval_fn, log)


def train_boundary_baseline(dataset, kappa: float, epsilon: float, model_config: ModelConfig,
                            train_config: TrainConfig, checkpoint=None, loss_csv=None, eval_fn=None,
                            log=None) -> TrainReport:
    """Fit the same model on trajectories with cost in [kappa - eps, kappa + eps], raw CTG."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    band = boundary_band(dataset, kappa, epsilon)
    if not len(band):
        raise ValueError(f"boundary band is empty for epsilon={epsilon} around kappa={kappa}")
    return _fit(list(band), model_config, train_config, float(kappa) if kappa > 0 else 1.0, checkpoint, loss_csv,
                eval_fn, log)
