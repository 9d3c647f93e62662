"""Reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps an ndarray plus an optional tape record (parent tensors and
a gradient closure). Ops only record the tape when some parent requires a
gradient, so forward passes through frozen models build no graph at all.
``backward`` topologically sorts the graph reaching a scalar loss and
visits each node exactly once in reverse order.

The heavy ops (attention, layernorm, GELU, softmax, cross entropy) call
into :mod:`latefuse.kernels`, which dispatches to numba or numpy.
Finite-difference helpers at the bottom provide the independent check used
by the gradient test suites.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContextLengthError, MaskError, ShapeError

Array = np.ndarray


def _as_array(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """Float64 array node. Leaves with requires_grad=True are trainable."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[Array], Sequence[Array | None]] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def freeze(self) -> "Tensor":
        """Drop trainability and lock the buffer against writes."""
        self.requires_grad = False
        self.grad = None
        self.data.flags.writeable = False
        return self

    def backward(self) -> None:
        backward(self)

    # operator sugar; the free functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def _result(data: Array, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to the shape it broadcast up from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(b)
    data = a.data + b.data

    def grad_fn(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _result(data, (a, b), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(b)
    data = a.data * b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _result(data, (a, b), grad_fn)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def grad_fn(g):
        return (g * data,)

    return _result(data, (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul needs (m,k)@(k,n), got {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _result(data, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    data = np.ascontiguousarray(a.data.T)

    def grad_fn(g):
        return (np.ascontiguousarray(g.T),)

    return _result(data, (a,), grad_fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def grad_fn(g):
        outs = []
        at = 0
        for p, n in zip(parts, sizes):
            outs.append(g[at : at + n] if p.requires_grad else None)
            at += n
        return outs

    return _result(data, parts, grad_fn)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a (n, d) matrix."""
    parts = tuple(parts)
    data = np.stack([p.data for p in parts], axis=0)

    def grad_fn(g):
        return [g[i] if p.requires_grad else None for i, p in enumerate(parts)]

    return _result(data, parts, grad_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    data = np.ascontiguousarray(a.data[start:stop])

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _result(data, (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape).copy()

    def grad_fn(g):
        return (g.reshape(a.data.shape),)

    return _result(data, (a,), grad_fn)


def mean_axis0(a: Tensor) -> Tensor:
    n = a.data.shape[0]
    data = a.data.mean(axis=0)

    def grad_fn(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _result(data, (a,), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def grad_fn(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _result(data, (a,), grad_fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.mean())

    def grad_fn(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _result(data, (a,), grad_fn)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def grad_fn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _result(data, (table,), grad_fn)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True)) + eps
    data = a.data / norms

    def grad_fn(g):
        dot = (data * g).sum(axis=-1, keepdims=True)
        return ((g - data * dot) / norms,)

    return _result(data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# fused neural ops (kernel backed)
# ---------------------------------------------------------------------------


def gelu(a: Tensor) -> Tensor:
    flat = np.ascontiguousarray(a.data.ravel())
    data = kernels.gelu_forward(flat).reshape(a.data.shape)

    def grad_fn(g):
        df = kernels.gelu_backward(flat, np.ascontiguousarray(g.ravel()))
        return (df.reshape(a.data.shape),)

    return _result(data, (a,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2 or gain.data.shape != (x.data.shape[1],):
        raise ShapeError(f"layer_norm needs x (n,d) with gain (d,), got {x.data.shape} and {gain.data.shape}")
    y, mu, rstd = kernels.layernorm_forward(x.data, gain.data, bias.data, eps)

    def grad_fn(g):
        dx, dg, db = kernels.layernorm_backward(g, x.data, gain.data, mu, rstd)
        return (
            dx if x.requires_grad else None,
            dg if gain.requires_grad else None,
            db if bias.requires_grad else None,
        )

    return _result(y, (x, gain, bias), grad_fn)


def attention(q: Tensor, k: Tensor, v: Tensor, mask, n_heads: int = 1) -> Tensor:
    """Masked softmax attention, optionally multi-head over column slices.

    mask is a boolean (nq, nk) array, True = visible. Scores scale by
    1/sqrt(head dim); masked positions get exactly zero weight. A query row
    with no visible key raises MaskError.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention operands must be 2-D")
    nq, d = q.data.shape
    if k.data.shape[1] != d or v.data.shape != k.data.shape:
        raise ShapeError(
            f"attention needs q (nq,d), k (nk,d), v (nk,d); got {q.data.shape}, {k.data.shape}, {v.data.shape}"
        )
    if d % n_heads != 0:
        raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
    mask = np.asarray(mask)
    if mask.shape != (nq, k.data.shape[0]):
        raise ShapeError(f"mask shape {mask.shape} does not match scores {(nq, k.data.shape[0])}")
    mask_u8 = np.ascontiguousarray(mask != 0, dtype=np.uint8)
    dead = np.where(mask_u8.sum(axis=1) == 0)[0]
    if dead.size:
        raise MaskError(f"query rows {dead.tolist()} have no visible key")
    out, w = kernels.attention_forward(q.data, k.data, v.data, mask_u8, n_heads)

    def grad_fn(g):
        dq, dk, dv = kernels.attention_backward(g, q.data, k.data, v.data, w, n_heads)
        return (
            dq if q.requires_grad else None,
            dk if k.requires_grad else None,
            dv if v.requires_grad else None,
        )

    return _result(out, (q, k, v), grad_fn)


def softmax(v: Tensor, temperature: float = 1.0) -> Tensor:
    """Stable softmax over a 1-D tensor with a temperature divisor."""
    if v.data.ndim != 1 or v.data.size == 0:
        raise ValueError(f"softmax needs a non-empty 1-D tensor, got shape {v.data.shape}")
    if not temperature > 0.0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    p = kernels.softmax_rows(np.ascontiguousarray(v.data[None, :] / temperature))[0]

    def grad_fn(g):
        dot = float(p @ g)
        return (p * (g - dot) / temperature,)

    return _result(p, (v,), grad_fn)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy needs 1-D logits, got shape {logits.data.shape}")
    n = logits.data.size
    target = int(target)
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} classes")
    t = np.array([target], dtype=np.int64)
    losses, probs = kernels.cross_entropy_rows(np.ascontiguousarray(logits.data[None, :]), t)

    def grad_fn(g):
        d = kernels.cross_entropy_rows_backward(probs, t, np.asarray(g, dtype=float).reshape(1))
        return (d[0],)

    return _result(np.asarray(losses[0]), (logits,), grad_fn)


def sequence_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of per-row cross entropies over a (T,V) logit matrix.

    weights default to all-ones; zero-weight rows are excluded from both
    the mean and the gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"sequence_cross_entropy needs (T,V) logits, got {logits.data.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.data.shape[0],):
        raise ShapeError(f"targets shape {targets.shape} does not match {logits.data.shape[0]} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.data.shape[1]):
        raise IndexError("target id out of vocabulary range")
    if weights is None:
        w = np.ones(targets.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise ValueError("sequence_cross_entropy needs positive total weight")
    losses, probs = kernels.cross_entropy_rows(logits.data, targets)
    data = np.asarray(float(losses @ w) / total)

    def grad_fn(g):
        scale = (w / total) * np.asarray(g).item()
        return (kernels.cross_entropy_rows_backward(probs, targets, scale),)

    return _result(data, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# graph walk
# ---------------------------------------------------------------------------


class Graph:
    """Topological ordering of every tensor reaching a root."""

    def __init__(self, root: Tensor):
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order  # parents before children

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._grad_fn is None]


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, Array]:
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf.

    Sets ``.grad`` on each tensor in the graph that requires a gradient and
    returns a map keyed by leaf tensor. When ``leaves`` is given, the map
    covers exactly those tensors, with zeros for any that the loss never
    touched. Raises ValueError for a non-scalar loss.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    graph = Graph(loss)
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g
        if node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            have = grads.get(id(parent))
            grads[id(parent)] = pg if have is None else have + pg
    if leaves is None:
        return {n: n.grad for n in graph.leaves() if n.requires_grad and n.grad is not None}
    out = {}
    in_graph = {id(n) for n in graph.nodes}
    for leaf in leaves:
        if id(leaf) in in_graph and leaf.grad is not None:
            out[leaf] = leaf.grad
        else:
            out[leaf] = np.zeros_like(leaf.data)
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def finite_difference(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> Array:
    """Central-difference gradient of a scalar-valued closure wrt param.

    Rebuilds the forward pass per probe; never touches the analytic tape.
    """
    base = param.data
    writeable = base.flags.writeable
    base.flags.writeable = True
    try:
        grad = np.zeros_like(base)
        flat = base.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = fn().data.item()
            flat[i] = keep - h
            down = fn().data.item()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        return grad
    finally:
        base.flags.writeable = writeable


def gradient_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    rtol: float = 1e-4,
) -> float:
    """Max relative error between tape and finite-difference gradients.

    Relative error per parameter uses max(1, |numeric|) in the denominator
    so near-zero gradients compare absolutely. Raises AssertionError above
    rtol; returns the worst error observed.
    """
    loss = fn()
    grads = backward(loss, leaves=params)
    worst = 0.0
    for p in params:
        numeric = finite_difference(fn, p, h)
        denom = np.maximum(1.0, np.abs(numeric))
        err = float(np.max(np.abs(grads[p] - numeric) / denom)) if p.data.size else 0.0
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(f"gradient mismatch {err:.3e} > {rtol:.1e} on shape {p.data.shape}")
    return worst
