"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations the policy needs are here. Each op builds its output
tensor with references to its parents and a closure that pushes the output
gradient back to them; :class:`Tape` orders the graph and runs the
closures once each in reverse.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels

DTYPE = np.float64
CKPT_FORMAT = "b2r-ckpt-1"
NEG_INF = -1e30


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf", name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        Tape(self).backward(grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray, owned: bool = False):
    """Add ``g`` into ``t.grad``; ``owned`` means g is a fresh array nobody else holds."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if owned and g.dtype == DTYPE else np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(data, parents, op, backward) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg, _parents=tuple(parents) if rg else (), op=op)
    if rg:
        out._backward = backward
    return out


class Tape:
    """Topologically ordered record of the graph below ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order  # parents before children

    def backward(self, grad=None):
        root = self.root
        if grad is None:
            if root.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(root.data)
        root.grad = np.asarray(grad, dtype=DTYPE).reshape(root.shape).copy()
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    flat = b.data.ndim == 2 and a.data.ndim > 2
    if flat:
        # (..., n) @ (n, m): one 2-D GEMM instead of a batched one
        out_data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[1])
    else:
        out_data = a.data @ b.data

    def back(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.shape), True)
            if b.requires_grad:
                _accum(b, a.data.reshape(-1, a.shape[-1]).T @ g2, True)
            return
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(out_data, (a, b), "matmul", back)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from None

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), "add", back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}") from None

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), "mul", back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), "scale", lambda g: _accum(a, g * c))


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis of ``x + mask`` (mask is additive, constant)."""
    xd = x.data
    if xd.ndim == 4 and (mask is None or (np.ndim(mask) in (2, 4) and np.shape(mask)[-3:-2] in ((), (1,)))):
        b, _, t, s = xd.shape
        m = np.zeros((t, s)) if mask is None else np.asarray(mask, dtype=DTYPE)
        m = np.ascontiguousarray(np.broadcast_to(m.reshape(-1, t, s), (b, t, s)))
        y = kernels.softmax_masked(np.ascontiguousarray(xd), m)
    else:
        z = xd if mask is None else xd + mask
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        s = y.shape[-1]
        gx = kernels.softmax_bwd(np.ascontiguousarray(g).reshape(-1, s), y.reshape(-1, s))
        _accum(x, gx.reshape(y.shape), True)

    return _node(y, (x,), "softmax", back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} do not match features {x.shape[-1:]}")
    d = x.shape[-1]
    out, xhat, inv = kernels.layer_norm_fwd(np.ascontiguousarray(x.data).reshape(-1, d), gamma.data, beta.data, eps)
    out = out.reshape(x.shape)

    def back(g):
        gx, dgamma, dbeta = kernels.layer_norm_bwd(np.ascontiguousarray(g).reshape(-1, d), xhat, inv, gamma.data)
        if gamma.requires_grad:
            _accum(gamma, dgamma, True)
        if beta.requires_grad:
            _accum(beta, dbeta, True)
        if x.requires_grad:
            _accum(x, gx.reshape(x.shape), True)

    return _node(out, (x, gamma, beta), "layer_norm", back)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    # derivative comes out of the same pass so backward is a single multiply
    out, deriv = kernels.gelu_fwd(np.ascontiguousarray(x.data).reshape(-1))
    out = out.reshape(x.shape)
    if not x.requires_grad:
        return Tensor(out)
    deriv = deriv.reshape(x.shape)
    return _node(out, (x,), "gelu", lambda g: _accum(x, g * deriv, True))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. ``rng=None`` or ``p=0`` is the identity (inference)."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return dropout_with_mask(x, keep)


def dropout_with_mask(x: Tensor, keep: np.ndarray) -> Tensor:
    return _node(x.data * keep, (x,), "dropout", lambda g: _accum(x, g * keep, True))


def embed_lookup(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for table {table.shape}")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, gt)

    return _node(table.data[idx], (table,), "embed", back)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat shape mismatch: {[x.shape for x in xs]} on axis {axis}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        for x, gp in zip(xs, np.split(g, sizes, axis=axis)):
            _accum(x, gp)

    return _node(out, tuple(xs), "concat", back)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in parts)


def slice_(x: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            if basic:
                gx[index] = g
            else:
                np.add.at(gx, index, g)
            _accum(x, gx, True)

    return _node(x.data[index], (x,), "slice", back)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), "reshape", lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), "transpose", lambda g: _accum(x, np.transpose(g, inv)))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), "clip", lambda g: _accum(x, g * inside))


def gaussian_nll(mu: Tensor, log_std: Tensor, target, weight=None) -> Tensor:
    """Weighted mean over rows of -log N(target; mu, diag exp(log_std)^2).

    ``mu`` is (N, A), ``log_std`` broadcasts against it. Rows with zero
    weight (padding) drop out. The forward sum is exactly rounded, so the
    value does not depend on row order.
    """
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != mu.shape:
        raise ShapeError(f"target {target.shape} does not match mu {mu.shape}")
    n = mu.shape[0]
    w = np.ones(n) if weight is None else np.asarray(weight, dtype=DTYPE).reshape(n)
    wsum = math.fsum(w)
    if wsum <= 0:
        raise ValueError("gaussian_nll needs at least one unmasked row")
    ls = np.broadcast_to(log_std.data, mu.shape)
    inv_std = np.exp(-ls)
    z = (target - mu.data) * inv_std
    per = 0.5 * z * z + ls + 0.5 * math.log(2 * math.pi)
    rows = per.sum(axis=1) * w
    value = math.fsum(rows.tolist()) / wsum

    def back(g):
        g = float(g)
        wr = (w / wsum * g)[:, None]
        if mu.requires_grad:
            _accum(mu, -z * inv_std * wr)
        if log_std.requires_grad:
            _accum(log_std, _unbroadcast((1.0 - z * z) * wr, log_std.shape))

    return _node(np.array(value), (mu, log_std), "gaussian_nll", back)


# ---------------------------------------------------------------------------
# rotary embedding and attention


def rope_angles(positions, dim: int, base: float = 10000.0) -> np.ndarray:
    if dim % 2:
        raise ShapeError(f"rotary embedding needs an even dimension, got {dim}")
    theta = base ** (-np.arange(0, dim, 2, dtype=DTYPE) / dim)
    return np.asarray(positions, dtype=DTYPE)[..., None] * theta


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def apply_rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate feature pairs (2i, 2i+1) at position p by p * base**(-2i/dim).

    ``positions`` has length seq (shared across the batch) or the full
    leading shape of ``x`` minus the feature axis.
    """
    dim = x.shape[-1]
    positions = np.asarray(positions)
    if positions.shape[-1] != x.shape[-2]:
        raise ShapeError(f"{positions.shape[-1]} positions for sequence length {x.shape[-2]}")
    ang = rope_angles(positions, dim, base)
    cos, sin = np.cos(ang), np.sin(ang)
    if positions.ndim == 1:
        shape = x.shape
        flat = (-1,) + shape[-2:]

        def rot(a, sign):
            return kernels.rope_rotate(np.ascontiguousarray(a).reshape(flat), cos, sin, sign).reshape(shape)

        return _node(rot(x.data, 1.0), (x,), "rope", lambda g: _accum(x, rot(g, -1.0), True))
    return _node(_rotate(x.data, cos, sin), (x,), "rope", lambda g: _accum(x, _rotate(g, cos, -sin), True))


def causal_mask(seq: int, pad=None) -> np.ndarray:
    """Additive mask: token i sees j <= i, and never a padded key other than itself.

    ``pad`` is a boolean (batch, seq) array marking padded slots.
    """
    allowed = np.tril(np.ones((seq, seq), dtype=bool))
    if pad is None:
        return np.where(allowed, 0.0, NEG_INF)
    allowed = allowed[None] & ~np.asarray(pad, dtype=bool)[:, None, :]
    allowed |= np.eye(seq, dtype=bool)[None]
    return np.where(allowed, 0.0, NEG_INF)[:, None]  # (batch, 1, seq, seq) broadcasts over heads


def causal_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    seq = q.shape[-2]
    if mask is None:
        mask = causal_mask(seq)
    kt = transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))
    scores = scale(matmul(q, kt), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, mask), v)


# ---------------------------------------------------------------------------
# finite-difference check


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    n_checked: int = 0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4,
                   max_coords: int | None = None, rng: np.random.Generator | None = None,
                   floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    Relative error per coordinate is ``|g - fd| / max(|g|, |fd|, floor)``.
    ``max_coords`` samples that many coordinates per parameter.
    """
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    report = GradCheckReport()
    rng = rng or np.random.default_rng(0)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for c in coords:
            old = flat[c]
            flat[c] = old + h
            fp = f().data.item()
            flat[c] = old - h
            fm = f().data.item()
            flat[c] = old
            fd = (fp - fm) / (2 * h)
            g = analytic[pi].reshape(-1)[c]
            rel = abs(g - fd) / max(abs(g), abs(fd), floor)
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel > tol:
                report.failures.append((p.name or f"param{pi}", int(c), float(g), float(fd), float(rel)))
    return report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: dict) -> None:
    """Write ``{name: array}`` as a JSON header followed by little-endian float64 data."""
    names = sorted(tensors)
    header, blobs, offset = [], [], 0
    for name in names:
        arr = np.array(tensors[name], dtype="<f8", order="C")  # keeps 0-d shapes
        header.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps({"format": CKPT_FORMAT, "tensors": header}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", raw[:8])
    try:
        head = json.loads(raw[8 : 8 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header") from exc
    if head.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: checkpoint format {head.get('format')!r}, expected {CKPT_FORMAT}")
    body = raw[8 + n :]
    out = {}
    for t in head["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64)) * 8
        chunk = body[t["offset"] : t["offset"] + size]
        if len(chunk) != size:
            raise ValueError(f"{path}: tensor {t['name']} truncated")
        out[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(t["shape"]).astype(DTYPE)
    return out
