"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tensor wraps a numpy array; ops build a per-pass Tape of backward closures.
The tape is dynamic: it exists only between ``with Tape():`` and the single
``backward(root)`` call, after which it is discarded.  Ops called with no
active tape run forward-only (used for evaluation and sampling).

Gradient accumulation across passes is the caller's job: ``backward`` writes
per-pass adjoints into ``.grad``, overwriting whatever a previous pass left.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when an op's inputs have incompatible shapes."""


class Tensor:
    """Dense float64 tensor with an optional adjoint slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # Light operator sugar; everything routes through the module-level ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class _Record:
    """One executed op: output, ordered inputs, and the vector-Jacobian closure."""

    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: object  # callable(g_out: np.ndarray) -> tuple[np.ndarray | None, ...]


_ACTIVE = threading.local()


def _current_tape() -> "Tape | None":
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered record of ops for one forward pass; single-shot backward."""

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _current_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.tape = None

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Tensor) -> None:
        """Propagate d(root)/d(tensor) into ``.grad`` of every graph tensor.

        root must be a scalar.  Adjoints are per-pass: ``.grad`` is overwritten,
        not accumulated, so callers own cross-pass accumulation.  A second
        backward on the same tape is rejected.
        """
        if self._consumed:
            raise RuntimeError("backward called twice on the same tape")
        self._consumed = True
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        holders: dict[int, Tensor] = {id(root): root}
        # Records are appended in execution order, so one reverse sweep visits
        # each op exactly once with its output adjoint complete.
        for rec in reversed(self._records):
            g_out = adjoint.get(id(rec.out))
            if g_out is None:
                continue  # op not on the path from root
            for inp, g in zip(rec.inputs, rec.vjp(g_out)):
                if g is None:
                    continue
                key = id(inp)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + g
                else:
                    adjoint[key] = g
                    holders[key] = inp
        for key, tensor in holders.items():
            tensor.grad = adjoint[key]


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
    tape = _current_tape()
    if tape is None:
        return
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append(_Record(out, inputs, vjp))


def no_tape_active() -> bool:
    return _current_tape() is None


# --- ops -------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(n, k) @ (k, m) -> (n, m)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    _record(out, (a, b), vjp)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def vjp(g):
        return (g if a.requires_grad else None,
                g if b.requires_grad else None)

    _record(out, (a, b), vjp)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)

    def vjp(g):
        return (g if a.requires_grad else None,
                -g if b.requires_grad else None)

    _record(out, (a, b), vjp)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    _record(out, (a, b), vjp)
    return out


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)

    def vjp(g):
        return (g * s,)

    _record(out, (a,), vjp)
    return out


def log(a: Tensor) -> Tensor:
    """Elementwise natural log; input must be strictly positive."""
    if np.any(a.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    out = Tensor(np.log(a.data))

    def vjp(g):
        return (g / a.data,)

    _record(out, (a,), vjp)
    return out


# GELU, tanh approximation.  Smooth everywhere, which keeps central finite
# differences well-behaved (no ReLU kink to straddle).
_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
        return (g * dy,)

    _record(out, (a,), vjp)
    return out


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise (last axis) normalization to zero mean / unit variance."""
    if a.ndim != 2:
        raise ShapeError(f"layer_norm expects 2-D, got {a.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    out = Tensor(y)

    def vjp(g):
        # dx = inv * (g - mean(g) - y * mean(g * y)), means over the row
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    _record(out, (a,), vjp)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a (vocab, dim) table; grad scatter-adds back."""
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError(f"embedding_lookup ids must be a non-empty 1-D sequence")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ValueError(f"embedding_lookup: id out of range [0, {table.shape[0]})")
    out = Tensor(table.data[idx])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    _record(out, (table,), vjp)
    return out


# Probabilities this small are clamped before logs so KL terms stay finite.
PROB_FLOOR = 1e-12


def softmax_rows(a: Tensor) -> Tensor:
    """Row softmax with max-subtraction; output clamped to >= 1e-12 and
    renormalized, so every entry is strictly positive and rows sum to 1."""
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2-D, got {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    p = np.maximum(p, PROB_FLOOR)
    p = p / p.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        # Standard softmax Jacobian; the clamp only bites where p ~ 1e-12,
        # where the true local derivative is itself negligible.
        s = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - s),)

    _record(out, (a,), vjp)
    return out


def masked_softmax_rows(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax restricted to columns where mask is True.

    Masked entries come out exactly 0.0 (no clamp), so downstream sums carry
    exactly no contribution from them — this is what keeps causal attention
    bitwise causal.  Every row must have at least one allowed column.
    """
    if a.ndim != 2:
        raise ShapeError(f"masked_softmax_rows expects 2-D, got {a.shape}")
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ShapeError(f"masked_softmax_rows: mask {m.shape} vs data {a.shape}")
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax_rows: a row has no allowed columns")
    z = np.where(m, a.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)  # exp(-inf) == 0.0 exactly
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        s = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - s),)

    _record(out, (a,), vjp)
    return out


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row log-softmax via the shifted log-sum-exp; finite for finite input."""
    if a.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects 2-D, got {a.shape}")
    mx = a.data.max(axis=-1, keepdims=True)
    z = a.data - mx
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor(y)

    def vjp(g):
        # dz = g - softmax(z) * rowsum(g)
        p = np.exp(y)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    _record(out, (a,), vjp)
    return out


def reduce_mean(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean())
    n = a.data.size

    def vjp(g):
        return (np.full_like(a.data, float(g) / n),)

    _record(out, (a,), vjp)
    return out


def reduce_sum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def vjp(g):
        return (np.full_like(a.data, float(g)),)

    _record(out, (a,), vjp)
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    if any(t.ndim != 2 for t in tensors):
        raise ShapeError("concat expects 2-D tensors")
    other = 1 - axis
    ref = tensors[0].shape[other]
    if any(t.shape[other] != ref for t in tensors):
        raise ShapeError(f"concat: mismatched shapes {[t.shape for t in tensors]}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def vjp(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(p if t.requires_grad else None
                     for p, t in zip(pieces, tensors))

    _record(out, tuple(tensors), vjp)
    return out


def slice2d(a: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Contiguous block a[r0:r1, c0:c1]; grad zero-pads back."""
    if a.ndim != 2:
        raise ShapeError(f"slice2d expects 2-D, got {a.shape}")
    n, m = a.shape
    if not (0 <= r0 < r1 <= n and 0 <= c0 < c1 <= m):
        raise ShapeError(f"slice2d: [{r0}:{r1}, {c0}:{c1}] out of {a.shape}")
    out = Tensor(a.data[r0:r1, c0:c1].copy())

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[r0:r1, c0:c1] = g
        return (ga,)

    _record(out, (a,), vjp)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")
    out = Tensor(a.data.T.copy())

    def vjp(g):
        return (g.T,)

    _record(out, (a,), vjp)
    return out


# Registry used by the property tests to sweep every op.
OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "mul_scalar": mul_scalar,
    "log": log,
    "gelu": gelu,
    "layer_norm": layer_norm,
    "embedding_lookup": embedding_lookup,
    "softmax_rows": softmax_rows,
    "masked_softmax_rows": masked_softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "concat": concat,
    "slice2d": slice2d,
    "transpose": transpose,
}


# --- gradient checking -----------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of one analytic-vs-finite-difference comparison."""

    passed: bool
    max_error: float
    per_leaf: dict[str, float] = field(default_factory=dict)
    note: str = ""


FD_STEP = 1e-5
ABS_FALLBACK = 1e-8   # absolute criterion when the true gradient is ~0
TINY_GRAD = 1e-6


def check_gradients(build, leaves: dict[str, Tensor],
                    tolerance: float = 1e-4,
                    step: float = FD_STEP) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    build(leaves) must return a scalar Tensor; it is re-invoked for each
    perturbed evaluation, so it must be a pure function of the leaf values.
    Per element: relative error |a - f| / max(|a|, |f|) under tolerance, with
    an absolute fallback (|a - f| < 1e-8) when both are below 1e-6.
    A non-finite loss is reported, not raised.
    """
    for t in leaves.values():
        t.zero_grad()
    with Tape() as tape:
        loss = build(leaves)
        if loss.data.size != 1:
            raise ShapeError("check_gradients: build must return a scalar")
        if not np.isfinite(loss.data).all():
            return GradCheckReport(False, math.inf, {}, "non-finite loss")
        tape.backward(loss)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in leaves.items()}

    def eval_loss() -> float:
        value = build(leaves)  # no active tape: forward only
        return float(value.data.reshape(()))

    passed = True
    max_err = 0.0
    per_leaf: dict[str, float] = {}
    for name, t in leaves.items():
        worst = 0.0
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = eval_loss()
            flat[i] = keep - step
            down = eval_loss()
            flat[i] = keep
            if not (math.isfinite(up) and math.isfinite(down)):
                return GradCheckReport(False, math.inf, per_leaf,
                                       f"non-finite loss while probing {name}")
            fd = (up - down) / (2.0 * step)
            an = float(analytic[name].reshape(-1)[i])
            diff = abs(an - fd)
            if abs(an) < TINY_GRAD and abs(fd) < TINY_GRAD:
                ok = diff < ABS_FALLBACK
                err = diff
            else:
                err = diff / max(abs(an), abs(fd))
                ok = err < tolerance
            if not ok:
                passed = False
            worst = max(worst, err)
        per_leaf[name] = worst
        max_err = max(max_err, worst)
    return GradCheckReport(passed, max_err, per_leaf)
