"""Dense float tensors with reverse-mode automatic differentiation.

Exactly the operations the encoder needs, nothing more: matmul, row
softmax, exact GELU, layer norm, embedding lookup, masked cross-entropy,
inverted dropout, plus the elementwise/shape plumbing between them. Each
op records its parents and a backward closure; ``backward`` runs a reverse
topological sweep with accumulating (+=) gradient semantics.

Training runs in float32; a float64 path (same code, float64 data) exists
for gradient checking. Setting the ``MLMKIT_DEBUG_NAN`` environment
variable makes every op assert its output is NaN-free whenever all of its
inputs were finite.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonDeterministicFunctionError(RuntimeError):
    """Raised when a function handed to the gradient checker is not pure."""


def _debug_nan() -> bool:
    return bool(os.environ.get("MLMKIT_DEBUG_NAN"))


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Leaf tensors created with ``requires_grad=True`` get a zero gradient
    buffer immediately, so an unused parameter reports an all-zero
    gradient rather than ``None``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        self.data = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if _debug_nan() and all(np.isfinite(p.data).all() for p in parents):
        if np.isnan(data).any():
            raise FloatingPointError("NaN produced by a forward op on finite inputs")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * a.data.dtype.type(c)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * a.data.dtype.type(c))

    return _make(data, (a,), backward_fn)


def tsum(a: Tensor) -> Tensor:
    data = a.data.sum()

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    return _make(np.asarray(data), (a,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    data = np.ascontiguousarray(a.data.T)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    return _make(data, (a,), backward_fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not 0 <= start < stop <= a.data.shape[1]:
        raise ValueError(f"bad column slice [{start}:{stop}] of {a.data.shape}")
    data = a.data[:, start:stop].copy()

    def backward_fn(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, start:stop] += g

    return _make(data, (a,), backward_fn)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_cols needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def backward_fn(g):
        offset = 0
        for part, width in zip(parts, widths):
            if part.requires_grad:
                _accumulate(part, g[:, offset : offset + width])
            offset += width

    return _make(data, tuple(parts), backward_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis; rows sum to 1."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            _accumulate(x, y * (g - inner))

    return _make(y, (x,), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF via erf."""
    cdf = 0.5 * (1.0 + erf(x.data * x.data.dtype.type(_INV_SQRT2)))
    data = x.data * cdf

    def backward_fn(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * x.data.dtype.type(_INV_SQRT2PI)
            _accumulate(x, g * (cdf + x.data * pdf))

    return _make(data.astype(x.data.dtype, copy=False), (x,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with population (1/d) variance, then scale/shift."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError(
            f"layer_norm gamma/beta must have shape ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def backward_fn(g):
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True)
            term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, term * inv_std)

    return _make(data.astype(x.data.dtype, copy=False), (x, gamma, beta), backward_fn)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Row lookup; backward scatters (accumulating duplicate ids)."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("embedding ids must be a flat sequence")
    v = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        bad = int(idx[(idx < 0) | (idx >= v)][0])
        raise IndexError(f"embedding id {bad} out of range for table with {v} rows")
    data = table.data[idx]

    def backward_fn(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return _make(data, (table,), backward_fn)


def cross_entropy_masked(logits: Tensor, labels: list[tuple[int, int]]) -> Tensor:
    """Mean negative log-softmax of the true token over the labeled positions.

    ``labels`` is a list of (row, token id) pairs; gradient flows only
    through the labeled rows.
    """
    if not labels:
        raise ValueError("cross_entropy_masked requires at least one label")
    t, v = logits.data.shape
    positions = np.asarray([p for p, _ in labels], dtype=np.int64)
    targets = np.asarray([y for _, y in labels], dtype=np.int64)
    if positions.min() < 0 or positions.max() >= t:
        raise IndexError(f"label position out of range for {t} rows")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"label token id out of range for vocab {v}")

    rows = logits.data[positions]
    m = rows.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=-1))
    picked = rows[np.arange(len(labels)), targets]
    count = len(labels)
    data = np.asarray((lse - picked).sum() / count, dtype=logits.data.dtype)

    def backward_fn(g):
        if logits.requires_grad:
            probs = np.exp(rows - lse[:, None])
            probs[np.arange(count), targets] -= 1.0
            if logits.grad is None:
                logits.grad = np.zeros_like(logits.data)
            np.add.at(logits.grad, positions, probs * (g / count))

    return _make(data, (logits,), backward_fn)


def dropout(x: Tensor, p: float, mode: str = "train", rng=None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p).

    Eval mode (and p = 0) is the exact identity. ``rng`` is an integer seed
    or a ``numpy.random.Generator``; masks are reproducible per seed.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    keep = (gen.random(x.data.shape) >= p).astype(x.data.dtype)
    keep /= x.data.dtype.type(1.0 - p)
    data = x.data * keep

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g * keep)

    return _make(data, (x,), backward_fn)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-topological gradient sweep from a scalar loss.

    Seeds d(loss)/d(loss) = 1 and accumulates into every reachable tensor
    that requires grad; calling twice accumulates twice.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    order = _topo_order(loss)
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    max_rel_error: float
    tolerance: float
    num_checked: int
    failures: list[tuple[int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _rel_error(a: float, n: float, floor: float) -> float:
    denom = max(abs(a), abs(n), floor)
    return abs(a - n) / denom


def finite_diff_check(
    f,
    x: Tensor,
    h: float = 1e-4,
    tolerance: float = 1e-6,
    num_samples: int = 20,
    rng=None,
    analytic: np.ndarray | None = None,
    floor: float = 1e-12,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` w.r.t. ``x`` against central differences.

    ``f`` must be a deterministic scalar-valued function of ``x`` (run any
    dropout in eval mode); non-determinism is detected by evaluating twice.
    ``analytic`` overrides the internally computed gradient, which lets a
    caller check a lower-precision backward pass against this oracle.

    Relative error per coordinate is |a - n| / max(|a|, |n|, ``floor``).
    Central differences resolve a derivative only to about
    eps(f) * |f| / (2h) in absolute terms, so for coordinates whose
    gradient sits below that resolution a pure relative comparison
    measures nothing but noise; the floor makes such coordinates pass
    exactly when |a - n| <= floor * tolerance, i.e. when they agree to
    the oracle's own resolution. A wrong backward rule still produces
    |a - n| on the order of the true gradient and is flagged.
    """
    first = f(x)
    second = f(x)
    if first.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    if not np.array_equal(first.data, second.data):
        raise NonDeterministicFunctionError(
            "function is not deterministic; repeated evaluation differed"
        )

    if analytic is None:
        if not x.requires_grad:
            raise ValueError("x must require grad")
        x.zero_grad()
        backward(f(x))
        analytic = x.grad.copy()
        x.zero_grad()

    gen = np.random.default_rng(rng)
    size = x.data.size
    count = min(num_samples, size)
    coords = gen.choice(size, size=count, replace=False)

    flat = x.data.reshape(-1)
    analytic_flat = np.asarray(analytic).reshape(-1)
    max_rel = 0.0
    failures: list[tuple[int, float, float, float]] = []
    for idx in coords:
        idx = int(idx)
        original = flat[idx]
        flat[idx] = original + h
        f_plus = float(f(x).data)
        flat[idx] = original - h
        f_minus = float(f(x).data)
        flat[idx] = original
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic_flat[idx])
        rel = _rel_error(a, numeric, floor)
        if rel > tolerance:
            failures.append((idx, a, numeric, rel))
        max_rel = max(max_rel, rel)
    return GradCheckReport(
        max_rel_error=max_rel, tolerance=tolerance, num_checked=count, failures=failures
    )
