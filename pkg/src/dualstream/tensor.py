"""A small dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays of rank at most 3. Operations are recorded
on the :class:`Graph` that is active in the current context (``with Graph()
as g:``) whenever at least one input requires a gradient; outside a graph
every op is a plain forward computation. Because the active graph lives in a
:class:`contextvars.ContextVar`, separate threads build separate graphs and can
share read-only parameter tensors.

    >>> w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    >>> with Graph() as g:
    ...     loss = sum_all(w)
    >>> backward(loss, g)
    >>> w.grad
    array([[1., 1.],
           [1., 1.]])
"""

from __future__ import annotations

import itertools
import math
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

MAX_RANK = 3
PROB_FLOOR = 1e-12

_node_ids = itertools.count()
_active_graph: ContextVar["Graph | None"] = ContextVar("dualstream_active_graph", default=None)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractViolation(ValueError):
    """An operation precondition (other than shape agreement) does not hold."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # skip the copy in __init__ for freshly computed op outputs
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node_id = next(_node_ids)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    """One recorded primitive application."""

    tag: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_graph.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, tag, inputs, output, backward_fn) -> None:
        self.nodes.append(Node(tag, tuple(inputs), output, backward_fn))

    def leaves(self) -> list[Tensor]:
        """Gradient-requiring tensors consumed by the graph but produced outside it."""
        produced = {node.output.node_id for node in self.nodes}
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.node_id not in produced:
                    seen.setdefault(t.node_id, t)
        return list(seen.values())

    def gradients(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from ``loss``; returns accumulated gradients keyed by node id.

        Does not touch any tensor's ``.grad``, so several graphs sharing
        parameters can be differentiated concurrently.
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(node.output.node_id)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        return grads


def active_graph() -> Graph | None:
    return _active_graph.get()


def _emit(tag: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    graph = _active_graph.get()
    track = graph is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, track)
    if track:
        graph.record(tag, inputs, result, backward_fn)
    return result


def gradients_for(loss: Tensor, graph: Graph, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for ``params`` in order, without mutating them.

    Parameters the loss does not depend on get zero arrays.
    """
    grads = graph.gradients(loss)
    return [grads.get(p.node_id, np.zeros_like(p.data)) for p in params]


def backward(loss: Tensor, graph: Graph | None = None, params: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` on every gradient-requiring tensor of ``graph``.

    Existing gradients are overwritten, never accumulated. Tensors listed in
    ``params`` that the loss does not reach get all-zero gradients.
    """
    graph = graph if graph is not None else _active_graph.get()
    if graph is None:
        raise ContractViolation("backward needs the graph that produced the loss")
    grads = graph.gradients(loss)
    for t in itertools.chain(graph.leaves(), params):
        t.grad = grads.get(t.node_id, np.zeros_like(t.data))
    for node in graph.nodes:
        out = node.output
        out.grad = grads.get(out.node_id, np.zeros_like(out.data))


# ---------------------------------------------------------------------------
# elementwise and shape operations


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def weighted_sum(terms: Sequence[tuple[float, Tensor]]) -> Tensor:
    """Σ cᵢ·tᵢ over same-shape tensors, as a single node."""
    if not terms:
        raise ContractViolation("weighted_sum needs at least one term")
    shape = terms[0][1].shape
    for _, t in terms:
        if t.shape != shape:
            raise DimensionError(f"weighted_sum: shapes {shape} and {t.shape} differ")
    out = terms[0][0] * terms[0][1].data
    for c, t in terms[1:]:
        out = out + c * t.data
    coeffs = [c for c, _ in terms]
    return _emit("weighted_sum", [t for _, t in terms], out,
                 lambda g: tuple(c * g for c in coeffs))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.T), lambda g: (g.T,))


def _split_rows(g: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    return np.split(g, np.cumsum(sizes)[:-1], axis=0)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractViolation("concat_rows needs at least one part")
    cols = parts[0].shape[1:]
    for p in parts:
        if p.ndim != 2 or p.shape[1:] != cols:
            raise DimensionError(
                f"concat_rows: column mismatch between {parts[0].shape} and {p.shape}")
    sizes = [p.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    return _emit("concat_rows", parts, out, lambda g: _split_rows(g, sizes))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractViolation("concat_cols needs at least one part")
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise DimensionError(f"concat_cols: row mismatch between {parts[0].shape} and {p.shape}")
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    return _emit("concat_cols", parts, out,
                 lambda g: np.split(g, np.cumsum(sizes)[:-1], axis=1))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[0]:
        raise DimensionError(f"slice_rows[{start}:{stop}] out of range for shape {a.shape}")
    shape = a.shape

    def _back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit("slice_rows", (a,), a.data[start:stop].copy(), _back)


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table`` (an embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.ndim != 1 or (ids.size and (ids.min() < 0 or ids.max() >= n)):
        raise ContractViolation(f"row ids {ids.tolist()} out of range for table with {n} rows")
    shape = table.shape

    def _back(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _emit("take_rows", (table,), table.data[ids], _back)


# ---------------------------------------------------------------------------
# nonlinearities, normalization, attention, loss


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("gelu", (x,), kernels.gelu_forward(xd), lambda g: (kernels.gelu_backward(xd, g),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learned gain and offset (both 1 x d)."""
    if x.ndim != 2 or gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
        raise DimensionError(
            f"layer_norm: input {x.shape} with gain {gain.shape} and bias {bias.shape}")
    gv = np.ascontiguousarray(gain.data[0])
    y, xhat, inv_std = kernels.layer_norm_forward(
        np.ascontiguousarray(x.data), gv, np.ascontiguousarray(bias.data[0]), eps)

    def _back(g):
        gx, gg, gb = kernels.layer_norm_backward(np.ascontiguousarray(g), xhat, inv_std, gv)
        return gx, gg[None, :], gb[None, :]

    return _emit("layer_norm", (x, gain, bias), y, _back)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Stable row softmax. ``mask`` (True = keep) zeroes excluded entries exactly."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got shape {x.shape}")
    if mask is not None and np.shape(mask) != x.shape:
        raise DimensionError(f"softmax_rows: mask {np.shape(mask)} vs input {x.shape}")
    try:
        y = kernels.softmax_rows(x.data, mask)
    except ValueError as exc:
        raise ContractViolation(str(exc)) from None
    return _emit("softmax_rows", (x,), y,
                 lambda g: (kernels.softmax_rows_backward(y, np.ascontiguousarray(g)),))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None,
                         heads: int, return_weights: bool = False):
    """softmax(QKᵀ/√dₕ)·V computed independently on ``heads`` column blocks.

    ``mask[i, j]`` True means query row i may attend key row j. With
    ``return_weights`` the heads x q x k weight array is returned as well.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(f"attention needs matrices, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise DimensionError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape} do not agree")
    d = q.shape[1]
    if heads < 1 or d % heads:
        raise DimensionError(f"attention: width {d} is not divisible by {heads} heads")
    if mask is None:
        mask = np.ones((q.shape[0], k.shape[0]), dtype=bool)
    elif np.shape(mask) != (q.shape[0], k.shape[0]):
        raise DimensionError(f"attention: mask {np.shape(mask)} vs scores {(q.shape[0], k.shape[0])}")
    scale_ = 1.0 / math.sqrt(d // heads)
    qd, kd, vd = (np.ascontiguousarray(t.data) for t in (q, k, v))
    try:
        out, weights = kernels.attention_forward(qd, kd, vd, mask, heads, scale_)
    except ValueError as exc:
        raise ContractViolation(str(exc)) from None

    def _back(g):
        return kernels.attention_backward(qd, kd, vd, weights, np.ascontiguousarray(g), heads, scale_)

    result = _emit("attention", (q, k, v), out, _back)
    return (result, weights) if return_weights else result


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
                         return_weights: bool = False):
    return multi_head_attention(q, k, v, mask, 1, return_weights)


def cross_entropy(probs: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-probability of ``targets`` under row distributions ``probs``."""
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or targets.shape != (probs.shape[0],):
        raise DimensionError(
            f"cross_entropy: probabilities {probs.shape} vs {targets.shape[0]} targets")
    t, vocab = probs.shape
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ContractViolation(f"targets {targets.tolist()} outside [0, {vocab})")
    rows = np.arange(t)
    picked = probs.data[rows, targets]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = -np.log(clamped).sum() / t

    def _back(g):
        full = np.zeros((t, vocab))
        full[rows, targets] = np.where(picked > PROB_FLOOR, -1.0 / (t * clamped), 0.0)
        return (full * float(g),)

    return _emit("cross_entropy", (probs,), np.array(loss), _back)
