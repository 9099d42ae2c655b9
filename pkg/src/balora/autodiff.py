"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every primitive applied to its nodes. ``backward``
walks the tape in reverse and returns gradients for the nodes registered as
parameters. Singular values are differentiable through ``svd_values`` using
``d sigma_i / dM = u_i v_i^T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from balora import linalg
from balora.errors import DomainError, NotDistribution, NotScalarLoss, ShapeMismatch

LOG_CLAMP = 1e-12
DIST_TOL = 1e-6
GAP_WARN = 1e-6

Backward = Callable[[np.ndarray], tuple]


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    tape: "Tape" = field(repr=False)
    grad: np.ndarray | None = field(default=None, repr=False)
    backward_fn: Backward | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


class Tape:
    """Ordered record of nodes; insertion order is a topological order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.parameters: set[int] = set()
        self.diagnostics: list[str] = []

    def _record(self, op: str, inputs: tuple[Node, ...], value, backward_fn: Backward | None) -> Node:
        node = Node(
            id=len(self.nodes),
            op=op,
            inputs=tuple(n.id for n in inputs),
            value=np.asarray(value, dtype=np.float64),
            tape=self,
            backward_fn=backward_fn,
        )
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._record("const", (), value, None)

    def parameter(self, value) -> Node:
        node = self._record("param", (), value, None)
        self.parameters.add(node.id)
        return node


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("nodes belong to different tapes")
        return x
    return tape.constant(x)


def _pair(a, b) -> tuple[Node, Node]:
    tape = a.tape if isinstance(a, Node) else b.tape
    return _lift(tape, a), _lift(tape, b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Node, b: Node, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# --- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Node:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return a.tape._record(
        "add", (a, b), a.value + b.value, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return a.tape._record(
        "sub", (a, b), a.value - b.value, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Node:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape._record(
        "mul",
        (a, b),
        av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Node:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return a.tape._record(
        "div",
        (a, b),
        out,
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return x.tape._record("scale", (x,), c * x.value, lambda g: (c * g,))


def relu(x: Node) -> Node:
    mask = x.value > 0.0
    return x.tape._record("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))


def matmul(a, b) -> Node:
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return a.tape._record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def take(x: Node, idx) -> Node:
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return x.tape._record("take", (x,), x.value[idx], back)


# --- reductions ---------------------------------------------------------------


def sum_(x: Node) -> Node:
    shape = x.shape
    return x.tape._record("sum", (x,), np.sum(x.value), lambda g: (np.full(shape, float(g)),))


def mean(x: Node) -> Node:
    shape, n = x.shape, x.value.size
    return x.tape._record("mean", (x,), np.mean(x.value), lambda g: (np.full(shape, float(g) / n),))


def sum_sq(x: Node) -> Node:
    xv = x.value
    return x.tape._record("sum_sq", (x,), np.sum(xv * xv), lambda g: (2.0 * float(g) * xv,))


def mse(a, b) -> Node:
    """Mean of squared entrywise differences."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse: {a.shape} vs {b.shape}")
    d = a.value - b.value
    n = d.size
    return a.tape._record(
        "mse", (a, b), np.mean(d * d), lambda g: (2.0 * float(g) * d / n, -2.0 * float(g) * d / n)
    )


def variance(x: Node) -> Node:
    """Population variance of all entries."""
    xv = x.value
    n = xv.size
    dev = xv - xv.mean()
    return x.tape._record("variance", (x,), np.mean(dev * dev), lambda g: (2.0 * float(g) * dev / n,))


# --- row-wise distributions ---------------------------------------------------


def _check_2d(x: Node, op: str) -> None:
    if x.value.ndim != 2:
        raise ShapeMismatch(f"{op} expects a 2-D input, got {x.shape}")


def softmax_rows(x: Node) -> Node:
    _check_2d(x, "softmax_rows")
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return x.tape._record(
        "softmax_rows", (x,), s, lambda g: (s * (g - np.sum(g * s, axis=1, keepdims=True)),)
    )


def log_softmax_rows(x: Node) -> Node:
    _check_2d(x, "log_softmax_rows")
    z = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return x.tape._record(
        "log_softmax_rows", (x,), out, lambda g: (g - s * g.sum(axis=1, keepdims=True),)
    )


def cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax of ``logits``."""
    _check_2d(logits, "cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    b, d = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatch(f"cross_entropy: {b} rows but labels shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= d:
        raise ShapeMismatch("cross_entropy: label out of range")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, labels])
    probs = np.exp(z - lse[:, None])

    def back(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (float(g) * grad / b,)

    return logits.tape._record("cross_entropy", (logits,), loss, back)


def _check_distribution(p: np.ndarray, op: str) -> None:
    if p.ndim != 2:
        raise ShapeMismatch(f"{op} expects probability rows, got shape {p.shape}")
    if np.any(p < -LOG_CLAMP):
        raise DomainError(f"{op}: negative probability {p.min():.3e}")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > DIST_TOL):
        raise NotDistribution(f"{op}: rows must sum to 1 within {DIST_TOL}")


def kl_rows(p, q) -> Node:
    """Per-row ``KL(p || q)``; logs are taken of probabilities clamped to [1e-12, 1]."""
    p, q = _pair(p, q)
    if p.shape != q.shape:
        raise ShapeMismatch(f"kl_rows: {p.shape} vs {q.shape}")
    _check_distribution(p.value, "kl_rows")
    _check_distribution(q.value, "kl_rows")
    pv, qv = p.value, q.value
    pc, qc = np.clip(pv, LOG_CLAMP, 1.0), np.clip(qv, LOG_CLAMP, 1.0)
    lp, lq = np.log(pc), np.log(qc)
    p_free = (pv >= LOG_CLAMP) & (pv <= 1.0)
    q_free = (qv >= LOG_CLAMP) & (qv <= 1.0)
    out = np.sum(pv * (lp - lq), axis=1)

    def back(g):
        g = g[:, None]
        gp = g * (lp - lq + p_free)
        gq = -g * pv * q_free / qc
        return gp, gq

    return p.tape._record("kl_rows", (p, q), out, back)


def entropy_rows(p: Node) -> Node:
    """Per-row Shannon entropy ``-sum p log p`` with the log clamp."""
    _check_distribution(p.value, "entropy_rows")
    pv = p.value
    lp = np.log(np.clip(pv, LOG_CLAMP, 1.0))
    free = (pv >= LOG_CLAMP) & (pv <= 1.0)
    out = -np.sum(pv * lp, axis=1)
    return p.tape._record("entropy_rows", (p,), out, lambda g: (-g[:, None] * (lp + free),))


# --- matrix statistics --------------------------------------------------------


def l2_normalize_rows(x: Node, eps: float = linalg.NORMALIZE_EPS) -> Node:
    _check_2d(x, "l2_normalize_rows")
    xv = x.value
    norms = np.linalg.norm(xv, axis=1, keepdims=True)
    dead = norms < eps
    safe = np.where(dead, 1.0, norms)
    y = xv / safe

    def back(g):
        proj = g - y * np.sum(g * y, axis=1, keepdims=True)
        return (np.where(dead, g, proj / safe),)

    return x.tape._record("l2_normalize_rows", (x,), y, back)


def covariance(x: Node) -> Node:
    _check_2d(x, "covariance")
    c = linalg.covariance(x.value)
    centered = x.value - x.value.mean(axis=0)
    denom = x.shape[0] - 1

    def back(g):
        gc = centered @ (g + g.T) / denom
        return (gc - gc.mean(axis=0),)

    return x.tape._record("covariance", (x,), c, back)


def offdiag_sq_sum(c: Node) -> Node:
    """Sum of squared off-diagonal entries of a square matrix."""
    cv = c.value
    if cv.ndim != 2 or cv.shape[0] != cv.shape[1]:
        raise ShapeMismatch(f"offdiag_sq_sum expects a square matrix, got {cv.shape}")
    off = cv - np.diag(np.diag(cv))
    return c.tape._record("offdiag_sq_sum", (c,), np.sum(off * off), lambda g: (2.0 * float(g) * off,))


def svd_values(x: Node) -> Node:
    """Descending singular values as a 1-D node."""
    _check_2d(x, "svd_values")
    f = linalg.svd(x.value)
    gaps = -np.diff(f.s)
    if gaps.size and gaps.min() < GAP_WARN:
        x.tape.diagnostics.append(
            f"svd_values: singular-value gap {gaps.min():.3e} below {GAP_WARN}; gradient is a subgradient"
        )
    u, v = f.u, f.v
    return x.tape._record("svd_values", (x,), f.s, lambda g: ((u * g) @ v.T,))


# --- backward -------------------------------------------------------------------


def backward(tape: Tape, loss: Node) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns ``{parameter id: gradient}``.

    Every node reachable from the loss gets its ``grad`` populated.
    """
    if loss.tape is not tape:
        raise ValueError("loss node is not on this tape")
    if loss.value.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None:
            continue
        node.grad = g
        if node.backward_fn is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            gi = np.asarray(gi, dtype=np.float64).reshape(tape.nodes[inp].shape)
            prev = grads.get(inp)
            grads[inp] = gi if prev is None else prev + gi
    return {
        pid: (grads[pid] if pid in grads else np.zeros_like(tape.nodes[pid].value))
        for pid in sorted(tape.parameters)
        if pid <= loss.id
    }


def grad_check(loss_builder: Callable[[Tape, Node], Node], point, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``loss_builder(tape, x)`` must build a scalar loss from the parameter node ``x``.
    The error per entry is ``|analytic - fd| / max(1, |fd|)``.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-7, 1e-3], got {step}")
    x0 = np.array(point, dtype=np.float64)

    def value_at(x: np.ndarray) -> float:
        tape = Tape()
        return float(loss_builder(tape, tape.parameter(x)).value)

    tape = Tape()
    param = tape.parameter(x0.copy())
    analytic = backward(tape, loss_builder(tape, param))[param.id]

    worst = 0.0
    for idx in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += step
        xm[idx] -= step
        fd = (value_at(xp) - value_at(xm)) / (2.0 * step)
        worst = max(worst, abs(analytic[idx] - fd) / max(1.0, abs(fd)))
    return worst


def min_singular_gap(m) -> float:
    """Smallest gap between adjacent singular values (inf for a single value)."""
    s = linalg.singular_values(m)
    return float(np.min(-np.diff(s))) if s.size > 1 else float("inf")
