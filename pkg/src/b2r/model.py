"""Transformer policy over (RTG, CTG, state, action) tokens with rotary positions."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AnnotatedTrajectory

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
N_TOKEN_TYPES = 4  # rtg, ctg, state, action


@dataclass
class ModelConfig:
    state_dim: int
    action_dim: int
    hidden_dim: int = 128
    n_heads: int = 8
    n_layers: int = 3
    dropout: float = 0.1
    context_len: int = 10
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    init_scale: float = 0.02
    action_low: tuple = (-1.0,)
    action_high: tuple = (1.0,)

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if (self.hidden_dim // self.n_heads) % 2:
            raise ValueError("per-head dimension must be even for rotary embeddings")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        self.action_low = tuple(float(x) for x in self.action_low)
        self.action_high = tuple(float(x) for x in self.action_high)


@dataclass
class TokenNorm:
    """Token scaling: rtg standardised, ctg divided by a budget scale, states standardised."""

    rtg_mean: float = 0.0
    rtg_std: float = 1.0
    ctg_scale: float = 1.0
    state_mean: list = field(default_factory=list)
    state_std: list = field(default_factory=list)

    @classmethod
    def fit(cls, records, ctg_scale: float) -> "TokenNorm":
        rtg = np.concatenate([np.asarray(at.rtg) for at in records])
        states = np.concatenate([at.traj.states for at in records])
        sstd = states.std(axis=0)
        return cls(
            rtg_mean=float(rtg.mean()),
            rtg_std=float(max(rtg.std(), 1e-6)),
            ctg_scale=float(ctg_scale) if ctg_scale > 0 else 1.0,
            state_mean=states.mean(axis=0).tolist(),
            state_std=np.where(sstd > 1e-6, sstd, 1.0).tolist(),
        )


@dataclass
class TokenWindow:
    """K time-aligned slots ending at timestep ``t``; left-padded at episode start.

    ``actions[-1]`` is the action to be predicted (a placeholder at
    deployment); attention order guarantees it is never read for its own
    prediction.
    """

    rtg: np.ndarray  # (K,)
    ctg: np.ndarray  # (K,)
    states: np.ndarray  # (K, S)
    actions: np.ndarray  # (K, A)
    pad: np.ndarray  # (K,) bool
    t: int = 0


@dataclass
class Batch:
    rtg: np.ndarray  # (B, K)
    ctg: np.ndarray
    states: np.ndarray  # (B, K, S)
    actions: np.ndarray  # (B, K, A)
    pad: np.ndarray  # (B, K)

    def __len__(self):
        return self.rtg.shape[0]


def tokenize(at: AnnotatedTrajectory, t: int, K: int) -> TokenWindow:
    h = at.horizon
    if not 0 <= t < h:
        raise IndexError(f"timestep {t} outside [0, {h})")
    lo = max(0, t - K + 1)
    n_pad = K - (t - lo + 1)
    s_dim, a_dim = at.traj.states.shape[1], at.traj.actions.shape[1]

    def padded(x, shape_tail):
        out = np.zeros((K, *shape_tail))
        out[n_pad:] = np.asarray(x[lo : t + 1]).reshape(-1, *shape_tail)
        return out

    return TokenWindow(
        rtg=padded(at.rtg, ()),
        ctg=padded(at.ctg, ()),
        states=padded(at.traj.states, (s_dim,)),
        actions=padded(at.traj.actions, (a_dim,)),
        pad=np.arange(K) < n_pad,
        t=t,
    )


def stack_windows(windows) -> Batch:
    return Batch(
        rtg=np.stack([w.rtg for w in windows]),
        ctg=np.stack([w.ctg for w in windows]),
        states=np.stack([w.states for w in windows]),
        actions=np.stack([w.actions for w in windows]),
        pad=np.stack([w.pad for w in windows]),
    )


class WindowIndex:
    """Vectorised window gathering over a whole dataset.

    Every trajectory is stored once with K-1 zero rows in front, so the
    window ending at step t is the contiguous block ``[t, t + K)``.
    """

    def __init__(self, records, K: int):
        self.K = K
        self.lengths = np.array([at.horizon for at in records], dtype=np.int64)
        pad = K - 1
        offsets, o = [], 0
        for h in self.lengths:
            offsets.append(o)
            o += h + pad
        self.offsets = np.array(offsets, dtype=np.int64)

        def cat(get, tail):
            parts = []
            for at in records:
                parts.append(np.zeros((pad, *tail)))
                parts.append(np.asarray(get(at), dtype=np.float64).reshape(-1, *tail))
            return np.concatenate(parts)

        s_dim, a_dim = records[0].traj.states.shape[1], records[0].traj.actions.shape[1]
        self.rtg = cat(lambda a: a.rtg, ())
        self.ctg = cat(lambda a: a.ctg, ())
        self.states = cat(lambda a: a.traj.states, (s_dim,))
        self.actions = cat(lambda a: a.traj.actions, (a_dim,))

    def gather(self, traj_idx, t) -> Batch:
        traj_idx = np.asarray(traj_idx, dtype=np.int64)
        t = np.asarray(t, dtype=np.int64)
        rows = (self.offsets[traj_idx] + t)[:, None] + np.arange(self.K)[None, :]
        pad = np.arange(self.K)[None, :] < (self.K - 1 - t)[:, None]
        return Batch(self.rtg[rows], self.ctg[rows], self.states[rows], self.actions[rows], pad)


class Policy:
    def __init__(self, config: ModelConfig, norm: TokenNorm | None = None, seed: int = 0):
        self.config = config
        self.norm = norm or TokenNorm(state_mean=[0.0] * config.state_dim, state_std=[1.0] * config.state_dim)
        self.params = self._init_params(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------
    def _init_params(self, rng) -> dict:
        c = self.config
        d, s = c.hidden_dim, c.init_scale
        resid = s / math.sqrt(2 * c.n_layers)

        def w(*shape, std=s):
            return rng.normal(0.0, std, shape)

        p = {
            "embed.rtg": w(1, d),
            "embed.ctg": w(1, d),
            "embed.state": w(c.state_dim, d),
            "embed.action": w(c.action_dim, d),
            "embed.bias": np.zeros(d),
            "embed.type": w(N_TOKEN_TYPES, d),
        }
        for i in range(c.n_layers):
            p |= {
                f"block{i}.ln1.g": np.ones(d),
                f"block{i}.ln1.b": np.zeros(d),
                f"block{i}.qkv.w": w(d, 3 * d),
                f"block{i}.qkv.b": np.zeros(3 * d),
                f"block{i}.proj.w": w(d, d, std=resid),
                f"block{i}.proj.b": np.zeros(d),
                f"block{i}.ln2.g": np.ones(d),
                f"block{i}.ln2.b": np.zeros(d),
                f"block{i}.fc.w": w(d, c.mlp_ratio * d),
                f"block{i}.fc.b": np.zeros(c.mlp_ratio * d),
                f"block{i}.out.w": w(c.mlp_ratio * d, d, std=resid),
                f"block{i}.out.b": np.zeros(d),
            }
        p |= {
            "ln_f.g": np.ones(d),
            "ln_f.b": np.zeros(d),
            "head.w": w(d, c.action_dim),
            "head.b": np.zeros(c.action_dim),
            "head.log_std": np.zeros(c.action_dim),
        }
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValueError(f"checkpoint/parameter name mismatch: {sorted(missing)}")
        for k, t in self.params.items():
            if t.shape != state[k].shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)

    # -- forward ----------------------------------------------------------
    def _normalize(self, b: Batch):
        n = self.norm
        live = ~b.pad
        rtg = np.where(live, (b.rtg - n.rtg_mean) / n.rtg_std, 0.0)
        ctg = np.where(live, b.ctg / n.ctg_scale, 0.0)
        states = np.where(live[..., None], (b.states - np.asarray(n.state_mean)) / np.asarray(n.state_std), 0.0)
        return rtg, ctg, states, b.actions

    def forward(self, batch: Batch, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Return (mu, log_std): mu is (B, K, A), one prediction per slot.

        ``rng`` enables dropout (training); ``None`` is deterministic inference.
        """
        c, P = self.config, self.params
        B, K = batch.rtg.shape
        d, nh = c.hidden_dim, c.n_heads
        dh = d // nh
        T = N_TOKEN_TYPES * K
        rtg, ctg, states, actions = self._normalize(batch)
        p_drop = c.dropout if rng is not None else 0.0

        types = ad.embed_lookup(P["embed.type"], np.arange(N_TOKEN_TYPES))  # (4, d)
        toks = [
            ad.matmul(Tensor(rtg[..., None]), P["embed.rtg"]),
            ad.matmul(Tensor(ctg[..., None]), P["embed.ctg"]),
            ad.add(ad.matmul(Tensor(states), P["embed.state"]), P["embed.bias"]),
            ad.matmul(Tensor(actions), P["embed.action"]),
        ]
        x = ad.concat([ad.reshape(t, (B, K, 1, d)) for t in toks], axis=2)  # (B, K, 4, d)
        x = ad.add(x, ad.reshape(types, (1, 1, N_TOKEN_TYPES, d)))
        x = ad.reshape(x, (B, T, d))
        x = ad.dropout(x, p_drop, rng)

        positions = np.repeat(np.arange(K), N_TOKEN_TYPES)
        token_pad = np.repeat(batch.pad, N_TOKEN_TYPES, axis=1)
        mask = ad.causal_mask(T, token_pad)

        for i in range(c.n_layers):
            pre = f"block{i}."
            h = ad.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
            qkv = ad.add(ad.matmul(h, P[pre + "qkv.w"]), P[pre + "qkv.b"])
            qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, nh, dh)), (2, 0, 3, 1, 4))  # (3, B, nh, T, dh)
            q = ad.apply_rope(ad.slice_(qkv, 0), positions, c.rope_base)
            k = ad.apply_rope(ad.slice_(qkv, 1), positions, c.rope_base)
            v = ad.slice_(qkv, 2)
            att = ad.causal_attention(q, k, v, mask)
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, d))
            att = ad.add(ad.matmul(att, P[pre + "proj.w"]), P[pre + "proj.b"])
            x = ad.add(x, ad.dropout(att, p_drop, rng))
            h = ad.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            h = ad.gelu(ad.add(ad.matmul(h, P[pre + "fc.w"]), P[pre + "fc.b"]))
            h = ad.add(ad.matmul(h, P[pre + "out.w"]), P[pre + "out.b"])
            x = ad.add(x, ad.dropout(h, p_drop, rng))
            if not np.all(np.isfinite(x.data)):
                raise FloatingPointError(f"non-finite activations after transformer layer {i}")

        x = ad.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        state_tok = ad.slice_(ad.reshape(x, (B, K, N_TOKEN_TYPES, d)), (slice(None), slice(None), 2))
        mu = ad.add(ad.matmul(state_tok, P["head.w"]), P["head.b"])
        log_std = ad.clip(P["head.log_std"], LOG_STD_MIN, LOG_STD_MAX)
        if not np.all(np.isfinite(mu.data)):
            raise FloatingPointError("non-finite action mean from the output head")
        return mu, log_std

    def nll(self, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
        """Mean Gaussian NLL of every unpadded action in the batch windows."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        mu, log_std = self.forward(batch, rng)
        A = self.config.action_dim
        return ad.gaussian_nll(
            ad.reshape(mu, (-1, A)), log_std, batch.actions.reshape(-1, A), (~batch.pad).reshape(-1).astype(float)
        )

    def predict(self, window_or_batch) -> tuple[np.ndarray, np.ndarray]:
        """(mu, log_std) for the last slot of each window, dropout off."""
        b = window_or_batch if isinstance(window_or_batch, Batch) else stack_windows([window_or_batch])
        mu, log_std = self.forward(b)
        return mu.data[:, -1, :], log_std.data

    def act(self, window_or_batch, mode: str = "mean", rng: np.random.Generator | None = None) -> np.ndarray:
        mu, log_std = self.predict(window_or_batch)
        if mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs an rng")
            mu = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        elif mode != "mean":
            raise ValueError(f"unknown action mode {mode!r}")
        out = np.clip(mu, self.config.action_low, self.config.action_high)
        return out[0] if not isinstance(window_or_batch, Batch) else out

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        path = Path(path)
        ad.save_checkpoint(path, self.state_dict())
        meta = {"model": asdict(self.config), "norm": asdict(self.norm)}
        config_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Policy":
        path = Path(path)
        meta = json.loads(config_path(path).read_text(encoding="utf-8"))
        pol = cls(ModelConfig(**meta["model"]), TokenNorm(**meta["norm"]))
        pol.load_state_dict(ad.load_checkpoint(path))
        return pol


def config_path(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.stem + ".config.json")


def nll_loss(policy: Policy, batch: Batch) -> Tensor:
    return policy.nll(batch)


def sample_action(policy: Policy, window: TokenWindow, mode: str = "mean", seed: int | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed) if mode == "sample" else None
    return policy.act(window, mode, rng)
