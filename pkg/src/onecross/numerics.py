"""Dense float64 tensors with reverse-mode differentiation.

Every op records how to push gradients back to its inputs; backward() replays
the records in exact reverse execution order. A central-difference gradient
checker serves as the independent oracle for all backward rules.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field

import numpy as np

# Log-domain zero. Kept far from float64 overflow so sums of a few sentinels
# stay finite; exp(LOG_ZERO) underflows to exactly 0.0.
LOG_ZERO = -1.0e30


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: ops inside record nothing (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


_op_counter = itertools.count()


class _OpRecord:
    """One executed op: output, inputs, and the gradient rule to replay."""

    __slots__ = ("name", "out", "parents", "bwd", "seq")

    def __init__(self, name, out, parents, bwd):
        self.name = name
        self.out = out
        self.parents = parents
        self.bwd = bwd
        self.seq = next(_op_counter)


class Tensor:
    """Row-major float64 array with an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._record = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        """Accumulate gradients of this scalar into every reachable input."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        self.grad = np.ones_like(self.data)
        records = []
        seen = set()
        stack = [self._record] if self._record is not None else []
        while stack:
            rec = stack.pop()
            if rec is None or id(rec) in seen:
                continue
            seen.add(id(rec))
            records.append(rec)
            for p in rec.parents:
                if p._record is not None:
                    stack.append(p._record)
        # Descending sequence number == exact reverse execution order.
        records.sort(key=lambda r: r.seq, reverse=True)
        for rec in records:
            grads = rec.bwd(rec.out.grad)
            for parent, g in zip(rec.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad += g

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"


def _check_finite(arr: np.ndarray, op: str):
    s = float(np.sum(arr))
    if not math.isfinite(s):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{op} produced a non-finite value")


def emit(name: str, out_data: np.ndarray, parents, bwd) -> Tensor:
    """Record one executed op and return its output tensor.

    bwd(grad_out) must return one gradient array (or None) per parent, in
    order. Gradient accumulation across multiple consumers is additive.
    """
    _check_finite(out_data, name)
    out = Tensor(out_data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._record = _OpRecord(name, out, tuple(parents), bwd)
    return out


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may also be a 1-D bias broadcast over the last axis."""
    if a.shape == b.shape:
        def bwd(g):
            return g, g
        return emit("add", a.data + b.data, (a, b), bwd)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def bwd(g):
            axes = tuple(range(g.ndim - 1))
            return g, g.sum(axis=axes)
        return emit("add_bias", a.data + b.data, (a, b), bwd)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        return g * b.data, g * a.data

    return emit("mul", a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return emit("scale", a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return emit("matmul", a.data @ b.data, (a, b), bwd)


def matmul_tb(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing the transpose (tied projections)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_tb: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        return g @ b.data, g.T @ a.data

    return emit("matmul_tb", a.data @ b.data.T, (a, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (y * g).sum(axis=axis, keepdims=True)),)

    return emit("softmax", y, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return emit("log_softmax", y, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor | None, bias: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to mean 0 / variance 1, then affine.

    gain/bias may be None for the affine-free variant.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x.data - mu) / sigma
    if gain is not None:
        out = xhat * gain.data + bias.data
        parents = (x, gain, bias)
    else:
        out = xhat
        parents = (x,)

    def bwd(g):
        dxhat = g * gain.data if gain is not None else g
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) / sigma
        if gain is None:
            return (dx,)
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return emit("layer_norm", out, parents, bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du),)

    return emit("gelu", y, (x,), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of table; backward scatter-adds into the table gradient."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("embedding: ids must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return emit("embedding", out, (table,), bwd)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int) -> Tensor:
    """1-D convolution over time. x: [T, Cin], w: [Cout, Cin, K], b: [Cout]."""
    T, cin = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d: channel mismatch {x.shape} vs {w.shape}")
    xp = np.zeros((T + 2 * padding, cin))
    xp[padding:padding + T] = x.data
    t_out = (T + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: input length {T} too short for kernel {k} stride {stride}")
    gather = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[gather]  # [t_out, K, Cin]
    out = np.einsum("tkc,ock->to", cols, w.data) + b.data

    def bwd(g):
        dw = np.einsum("to,tkc->ock", g, cols)
        db = g.sum(axis=0)
        dcols = np.einsum("to,ock->tkc", g, w.data)
        dxp = np.zeros_like(xp)
        np.add.at(dxp, gather, dcols)
        return dxp[padding:padding + T], dw, db

    return emit("conv1d", out, (x, w, b), bwd)


def attention_core(q: Tensor, k: Tensor, v: Tensor, n_heads: int, causal: bool) -> Tensor:
    """Multi-head scaled dot-product attention on projected streams.

    q: [Lq, d]; k, v: [Lk, d]. Splits d into n_heads, softmaxes over keys per
    head, and concatenates head outputs. Masked logits use a large negative
    constant so masked weights underflow to exactly 0.0 (keeps causality
    bitwise and everything finite).
    """
    lq, d = q.shape
    lk, dk = k.shape
    if dk != d or v.shape != (lk, d):
        raise ShapeError(f"attention: stream widths differ: q{q.shape} k{k.shape} v{v.shape}")
    if d % n_heads != 0:
        raise ShapeError(f"attention: width {d} not divisible by {n_heads} heads")
    if causal and lq != lk:
        raise ShapeError(f"attention: causal mask needs square scores, got {lq}x{lk}")
    dh = d // n_heads
    sc = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(lq, n_heads, dh)
    kh = k.data.reshape(lk, n_heads, dh)
    vh = v.data.reshape(lk, n_heads, dh)
    scores = np.einsum("qhd,khd->hqk", qh, kh) * sc
    if causal:
        scores = scores + np.triu(np.full((lq, lk), LOG_ZERO), k=1)[None, :, :]
    att = np.exp(scores - scores.max(axis=-1, keepdims=True))
    att /= att.sum(axis=-1, keepdims=True)
    out = np.einsum("hqk,khd->qhd", att, vh).reshape(lq, d)

    def bwd(g):
        gh = g.reshape(lq, n_heads, dh)
        datt = np.einsum("qhd,khd->hqk", gh, vh)
        dvh = np.einsum("hqk,qhd->khd", att, gh)
        dscores = att * (datt - (att * datt).sum(axis=-1, keepdims=True))
        dqh = np.einsum("hqk,khd->qhd", dscores, kh) * sc
        dkh = np.einsum("hqk,qhd->khd", dscores, qh) * sc
        return dqh.reshape(lq, d), dkh.reshape(lk, d), dvh.reshape(lk, d)

    return emit("attention", out, (q, k, v), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; rate 0 (the default everywhere) is an exact no-op."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout: rate {rate} outside [0, 1)")
    if rng is None:
        raise ValueError("dropout with rate > 0 needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bwd(g):
        return (g * keep,)

    return emit("dropout", x.data * keep, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.full_like(x.data, float(g)),)

    return emit("sum", np.asarray(x.data.sum()), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        return (np.full_like(x.data, float(g) / n),)

    return emit("mean", np.asarray(x.data.mean()), (x,), bwd)


# ---------------------------------------------------------------------------
# log-domain helpers


def log_sum_exp(xs) -> float:
    """Stable log(sum(exp(xs))) over plain floats; absorbs LOG_ZERO sentinels."""
    xs = list(xs)
    if not xs:
        return LOG_ZERO
    m = max(xs)
    if m <= LOG_ZERO:
        return LOG_ZERO
    return m + math.log(sum(math.exp(x - m) for x in xs))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    tol: float
    worst_param: str = ""
    per_param: dict = field(default_factory=dict)

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}, worst {self.worst_param})"


def grad_check(f, params: dict, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode grads of scalar f() against central differences.

    f must be deterministic and re-runnable; params maps names to the leaf
    tensors f reads. The denominator floors at 1e-3 so entries whose true
    gradient is zero are judged against FD roundoff, not divided by it.
    """
    for p in params.values():
        p.zero_grad()
    out = f()
    if not isinstance(out, Tensor):
        raise TypeError("grad_check: f must return a scalar Tensor")
    if not math.isfinite(out.item()):
        raise NonFiniteError("grad_check: f evaluated non-finite at the given params")
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    per_param = {}
    worst = ("", 0.0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"grad_check: f non-finite while perturbing {name}[{i}]")
            fd[i] = (fp - fm) / (2.0 * h)
        ad = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-3)
        rel = float(np.max(np.abs(ad - fd) / denom)) if flat.size else 0.0
        per_param[name] = rel
        if rel > worst[1]:
            worst = (name, rel)

    max_rel = worst[1]
    return GradCheckReport(
        passed=max_rel <= tol,
        max_rel_err=max_rel,
        tol=tol,
        worst_param=worst[0],
        per_param=per_param,
    )
