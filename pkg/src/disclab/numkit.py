"""Minimal reverse-mode differentiable numeric core.

Array-valued autodiff on float64 numpy arrays: each op builds a `Var` node
holding its value, its parents, and a closure that routes the upstream
gradient to the parents. `backward()` runs the closures in reverse
topological order. Only the ops the sibling modules need are provided --
dense layers, pointwise activations, set/spatial pooling, nearest-neighbor
upsampling -- plus Adam, a finite-difference gradient checker, and a JSON
checkpoint format (float32 on disk, float64 in memory).

Gradient buffers are never mutated in place; accumulation always allocates.
A `Var.grad` of None means "no gradient accumulated yet", which is how
`adam_step` tells a genuinely missing gradient apart from a zero one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class DimensionError(ValueError):
    """Shapes do not conform; the message names both shapes."""


class EmptySetError(ValueError):
    """An operation over a point set received zero points."""


class MissingGradientError(ValueError):
    """A parameter had no accumulated gradient when the optimizer ran."""


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or Inf."""


# ---------------------------------------------------------------------------
# autodiff graph


class Var:
    """Node in the reverse-mode graph wrapping a float64 ndarray."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    # Light operator sugar; the named functions below are the real surface.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)


def as_var(x) -> Var:
    """Lift an ndarray / scalar to a constant leaf Var (no-op on Vars)."""
    return x if isinstance(x, Var) else Var(x)


def _accum(v: Var, g: np.ndarray) -> None:
    v.grad = g if v.grad is None else v.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root: Var) -> None:
    """Reverse-accumulate gradients from `root` (seeded with ones).

    Leaf grads accumulate across calls; zero them explicitly with
    `ParamStore.zero_grad()` between optimizer steps.
    """
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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
            stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)


# ---------------------------------------------------------------------------
# ops


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value + b.value, (a, b))

    def _bw(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    out._backward = _bw
    return out


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value - b.value, (a, b))

    def _bw(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value * b.value, (a, b))

    def _bw(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    out._backward = _bw
    return out


def scale(x, c: float) -> Var:
    x = as_var(x)
    out = Var(x.value * c, (x,))

    def _bw(g):
        _accum(x, g * c)

    out._backward = _bw
    return out


def square(x) -> Var:
    x = as_var(x)
    out = Var(x.value * x.value, (x,))

    def _bw(g):
        _accum(x, 2.0 * x.value * g)

    out._backward = _bw
    return out


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul: shapes {a.value.shape} and {b.value.shape} do not conform"
        )
    out = Var(a.value @ b.value, (a, b))

    def _bw(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    out._backward = _bw
    return out


def affine(x, w, b) -> Var:
    """y = x @ w + b for x:(n,d_in), w:(d_in,d_out), b:(d_out,)."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    if (
        x.value.ndim != 2
        or w.value.ndim != 2
        or x.value.shape[1] != w.value.shape[0]
        or b.value.shape != (w.value.shape[1],)
    ):
        raise DimensionError(
            f"affine: x{x.value.shape} @ w{w.value.shape} + b{b.value.shape} do not conform"
        )
    out = Var(x.value @ w.value + b.value, (x, w, b))

    def _bw(g):
        _accum(x, g @ w.value.T)
        _accum(w, x.value.T @ g)
        _accum(b, g.sum(axis=0))

    out._backward = _bw
    return out


def relu(x) -> Var:
    x = as_var(x)
    mask = x.value > 0
    out = Var(np.where(mask, x.value, 0.0), (x,))

    def _bw(g):
        _accum(x, np.where(mask, g, 0.0))

    out._backward = _bw
    return out


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Var:
    x = as_var(x)
    s = _sigmoid_stable(x.value)
    out = Var(s, (x,))

    def _bw(g):
        _accum(x, g * s * (1.0 - s))

    out._backward = _bw
    return out


def softmax_rows(x) -> Var:
    """Row-wise softmax of a 2-d array, max-subtracted for stability."""
    x = as_var(x)
    if x.value.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2-d input, got shape {x.value.shape}")
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Var(s, (x,))

    def _bw(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        _accum(x, s * (g - dot))

    out._backward = _bw
    return out


def max_pool_set(features) -> tuple[Var, np.ndarray]:
    """Column-wise max over the rows of an (M, d) feature matrix.

    The symmetric (permutation-invariant) pooling of a point set. Returns the
    pooled d-vector and the winning row index per column; ties go to the
    lowest row index, and the backward pass routes gradient only to the
    winning rows.
    """
    f = as_var(features)
    if f.value.ndim != 2:
        raise DimensionError(f"max_pool_set: expected 2-d input, got shape {f.value.shape}")
    m, d = f.value.shape
    if m == 0:
        raise EmptySetError("max_pool_set: empty point set")
    idx = np.argmax(f.value, axis=0)  # first (= lowest) row wins ties
    cols = np.arange(d)
    out = Var(f.value[idx, cols], (f,))

    def _bw(g):
        gi = np.zeros_like(f.value)
        gi[idx, cols] = g
        _accum(f, gi)

    out._backward = _bw
    return out, idx


def mean_over(x, axes: tuple[int, ...] | None = None) -> Var:
    """Mean over the given axes (all axes when None)."""
    x = as_var(x)
    if axes is None:
        axes = tuple(range(x.value.ndim))
    count = 1
    for ax in axes:
        count *= x.value.shape[ax]
    out = Var(x.value.mean(axis=axes), (x,))

    def _bw(g):
        ge = np.expand_dims(g, axes) if axes else g
        _accum(x, np.broadcast_to(ge / count, x.value.shape).copy())

    out._backward = _bw
    return out


def mean_all(x) -> Var:
    return mean_over(x, None)


def sum_all(x) -> Var:
    x = as_var(x)
    out = Var(x.value.sum(), (x,))

    def _bw(g):
        _accum(x, np.broadcast_to(g, x.value.shape).copy())

    out._backward = _bw
    return out


def reshape(x, shape: tuple[int, ...]) -> Var:
    x = as_var(x)
    out = Var(x.value.reshape(shape), (x,))

    def _bw(g):
        _accum(x, g.reshape(x.value.shape))

    out._backward = _bw
    return out


def transpose(x, axes: tuple[int, ...]) -> Var:
    x = as_var(x)
    inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    out = Var(x.value.transpose(axes), (x,))

    def _bw(g):
        _accum(x, g.transpose(inv))

    out._backward = _bw
    return out


def concat_local_global(local, pooled) -> Var:
    """Append a shared d-vector to every row of an (M, d_local) matrix."""
    local, pooled = as_var(local), as_var(pooled)
    m = local.value.shape[0]
    d = pooled.value.shape[0]
    out = Var(
        np.concatenate([local.value, np.broadcast_to(pooled.value, (m, d))], axis=1),
        (local, pooled),
    )
    split = local.value.shape[1]

    def _bw(g):
        _accum(local, g[:, :split])
        _accum(pooled, g[:, split:].sum(axis=0))

    out._backward = _bw
    return out


def concat_cols(a, b) -> Var:
    """Concatenate two row-aligned matrices along columns."""
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[0] != b.value.shape[0]:
        raise DimensionError(f"concat_cols: shapes {a.value.shape}, {b.value.shape} do not align")
    split = a.value.shape[1]
    out = Var(np.concatenate([a.value, b.value], axis=1), (a, b))

    def _bw(g):
        _accum(a, g[:, :split])
        _accum(b, g[:, split:])

    out._backward = _bw
    return out


def segment_max_pool(x, group_size: int) -> Var:
    """Per-segment column max of a (B*m, d) matrix with equal segments.

    Equivalent to max_pool_set applied to each consecutive block of
    `group_size` rows; ties go to the lowest row within the segment.
    """
    x = as_var(x)
    if x.value.ndim != 2 or x.value.shape[0] % group_size != 0:
        raise DimensionError(
            f"segment_max_pool: shape {x.value.shape} not divisible into rows of {group_size}"
        )
    n, d = x.value.shape
    b = n // group_size
    x3 = x.value.reshape(b, group_size, d)
    idx = np.argmax(x3, axis=1)
    bi = np.arange(b)[:, None]
    ci = np.arange(d)[None, :]
    out = Var(x3[bi, idx, ci], (x,))

    def _bw(g):
        gi = np.zeros_like(x3)
        gi[bi, idx, ci] = g
        _accum(x, gi.reshape(n, d))

    out._backward = _bw
    return out


def tile_rows(x, times: int) -> Var:
    """Repeat each row of a (B, d) matrix `times` times -> (B*times, d)."""
    x = as_var(x)
    if x.value.ndim != 2:
        raise DimensionError(f"tile_rows: expected 2-d input, got {x.value.shape}")
    b, d = x.value.shape
    out = Var(np.repeat(x.value, times, axis=0), (x,))

    def _bw(g):
        _accum(x, g.reshape(b, times, d).sum(axis=1))

    out._backward = _bw
    return out


def blockwise_matmul(x, t, group_size: int) -> Var:
    """Multiply each block of `group_size` rows of x (B*m, p) by its own
    (p, q) matrix from t (B, p, q)."""
    x, t = as_var(x), as_var(t)
    n, p = x.value.shape
    if n % group_size != 0 or t.value.shape != (n // group_size, p, t.value.shape[2]):
        raise DimensionError(
            f"blockwise_matmul: x{x.value.shape} with groups of {group_size} vs t{t.value.shape}"
        )
    b = n // group_size
    x3 = x.value.reshape(b, group_size, p)
    out = Var(np.einsum("bmp,bpq->bmq", x3, t.value).reshape(n, -1), (x, t))

    def _bw(g):
        g3 = g.reshape(b, group_size, -1)
        _accum(x, np.einsum("bmq,bpq->bmp", g3, t.value).reshape(n, p))
        _accum(t, np.einsum("bmp,bmq->bpq", x3, g3))

    out._backward = _bw
    return out


def take(x, index: int) -> Var:
    """Scalar element of a 1-d vector, differentiable w.r.t. the vector."""
    x = as_var(x)
    out = Var(x.value[index], (x,))

    def _bw(g):
        gi = np.zeros_like(x.value)
        gi[index] = g
        _accum(x, gi)

    out._backward = _bw
    return out


def _pool_bounds(n_in: int, n_out: int) -> list[tuple[int, int]]:
    bounds = []
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -(-((i + 1) * n_in) // n_out)  # ceil
        bounds.append((lo, max(hi, lo + 1)))
    return bounds


def adaptive_avg_pool(x, out_h: int, out_w: int) -> Var:
    """Area-average pooling of a (C, H, W) map to (C, out_h, out_w)."""
    x = as_var(x)
    if x.value.ndim != 3:
        raise DimensionError(f"adaptive_avg_pool: expected (C,H,W), got {x.value.shape}")
    c, h, w = x.value.shape
    rb = _pool_bounds(h, out_h)
    cb = _pool_bounds(w, out_w)
    val = np.empty((c, out_h, out_w), dtype=np.float64)
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            val[:, i, j] = x.value[:, r0:r1, c0:c1].mean(axis=(1, 2))
    out = Var(val, (x,))

    def _bw(g):
        gi = np.zeros_like(x.value)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                n = (r1 - r0) * (c1 - c0)
                gi[:, r0:r1, c0:c1] += g[:, i, j][:, None, None] / n
        _accum(x, gi)

    out._backward = _bw
    return out


def upsample_nearest(x, out_h: int, out_w: int) -> Var:
    """Nearest-neighbor upsampling of a (C, H, W) map to (C, out_h, out_w)."""
    x = as_var(x)
    if x.value.ndim != 3:
        raise DimensionError(f"upsample_nearest: expected (C,H,W), got {x.value.shape}")
    c, h, w = x.value.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    out = Var(x.value[:, rows[:, None], cols[None, :]], (x,))

    def _bw(g):
        gi = np.zeros_like(x.value)
        np.add.at(gi, (slice(None), rows[:, None], cols[None, :]), g)
        _accum(x, gi)

    out._backward = _bw
    return out


def softmax_cross_entropy(logits, labels: np.ndarray, class_weights: np.ndarray | None = None) -> Var:
    """Mean of per-row weighted cross-entropy, fused with row softmax.

    `labels` are integer class indices; `class_weights` (one weight per
    class) rescales each row's loss, defaulting to uniform weights.
    """
    logits = as_var(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.value.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but labels shape {labels.shape}")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    logp = z - np.log(denom)
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    rows = np.arange(n)
    out = Var(-(w * logp[rows, labels]).mean(), (logits,))

    def _bw(g):
        gz = p.copy()
        gz[rows, labels] -= 1.0
        gz *= (w / n)[:, None] * g
        _accum(logits, gz)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# parameters, optimizer, gradient checker


class ParamStore:
    """Ordered, uniquely named map of learnable leaf Vars."""

    def __init__(self):
        self._params: dict[str, Var] = {}

    def add(self, name: str, value) -> Var:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = Var(np.array(value, dtype=np.float64))
        self._params[name] = v
        return v

    def __getitem__(self, name: str) -> Var:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.grad = None

    def n_elements(self) -> int:
        return sum(v.value.size for v in self._params.values())

    def clone_values(self) -> dict[str, np.ndarray]:
        return {name: v.value.copy() for name, v in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            p = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.value.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {arr.shape} != expected {p.value.shape}"
                )
            p.value = arr.copy()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class OptimizerState:
    """Adam moments plus a stepped learning-rate schedule.

    The effective rate is `lr * decay_factor ** (epoch // decay_period_epochs)`,
    i.e. it halves at every `decay_period_epochs`-th epoch when the factor
    is 0.5. Call `adam_step` after a backward pass has populated every
    parameter's gradient.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 1.0
    decay_period_epochs: int = 20
    step_count: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def effective_lr(self) -> float:
        if self.decay_factor == 1.0 or self.decay_period_epochs <= 0:
            return self.lr
        return self.lr * self.decay_factor ** (self.epoch // self.decay_period_epochs)


def adam_step(params: ParamStore, opt: OptimizerState) -> None:
    """One Adam update with bias correction, in place on the parameters."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"no gradient accumulated for parameter {name!r}")
        if p.grad.shape != p.value.shape:
            raise DimensionError(
                f"parameter {name!r}: gradient shape {p.grad.shape} != value shape {p.value.shape}"
            )
    opt.step_count += 1
    t = opt.step_count
    lr = opt.effective_lr()
    for name, p in params.items():
        g = p.grad
        m = opt.m.setdefault(name, np.zeros_like(p.value))
        v = opt.v.setdefault(name, np.zeros_like(p.value))
        m[...] = opt.beta1 * m + (1.0 - opt.beta1) * g
        v[...] = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        m_hat = m / (1.0 - opt.beta1**t)
        v_hat = v / (1.0 - opt.beta2**t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + opt.eps)


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between analytic and numeric grads."""

    per_param: dict[str, float]
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.per_param.values())

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})"]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"  {name}: max rel err {err:.3e}")
        return "\n".join(lines)


def grad_check(fn: Callable[[], Var], params: ParamStore, tol: float = 1e-4,
               step: float = 1e-5) -> GradCheckReport:
    """Check analytic gradients of a scalar `fn` against central differences.

    `fn` must be a deterministic closure over the parameters in `params`,
    returning a scalar Var. Relative error per element is
    |ga - gn| / max(1e-8, |ga| + |gn|); the report carries the max per
    parameter and passes iff all are below `tol`.
    """
    params.zero_grad()
    loss = fn()
    if loss.value.size != 1:
        raise DimensionError(f"grad_check: fn must return a scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value):
        raise NonFiniteError("grad_check: fn returned a non-finite loss")
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
        for name, p in params.items()
    }
    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().value)
            flat[i] = orig - step
            f_minus = float(fn().value)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"grad_check: non-finite loss while perturbing {name!r}")
            gn = (f_plus - f_minus) / (2.0 * step)
            err = abs(ga[i] - gn) / max(1e-8, abs(ga[i]) + abs(gn))
            if err > worst:
                worst = err
        report[name] = worst
    return GradCheckReport(per_param=report, tol=tol)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ParamStore, architecture: dict) -> None:
    """Write parameters + architecture descriptor as a diffable JSON file.

    Tensor values are rounded to single precision; keys are sorted and
    tensors ordered by name so identical states produce identical bytes.
    """
    tensors = []
    for name in sorted(params.names()):
        v = params[name].value.astype(np.float32)
        tensors.append({"name": name, "shape": list(v.shape), "values": v.tolist()})
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": architecture,
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    store = ParamStore()
    for t in doc["tensors"]:
        arr = np.asarray(t["values"], dtype=np.float64).reshape(t["shape"])
        store.add(t["name"], arr)
    return store, doc["architecture"]
