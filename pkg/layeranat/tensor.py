# layeranat/tensor.py
import logging
import math
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Finite stand-in for -inf above the causal diagonal
MASK_VALUE = -1e9
GELU_C = math.sqrt(2.0 / math.pi)

# Per-thread so concurrent evaluations cannot flip training threads into no-grad mode
_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disables graph recording inside the block (evaluation paths)."""
    previous = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


class ValueNode:
    """
    A node in the reverse-mode differentiation graph.

    Holds a dense array (float32 unless created from float64 leaves), a lazily
    allocated gradient of the same shape, the parent nodes it was computed from
    and the closure that pushes its gradient back to those parents.

    Attributes:
        data (np.ndarray): The node's value, row-major.
        requires_grad (bool): Whether gradients flow into this node.
        name (str): Optional label, parameters carry their qualified name.
    """

    __slots__ = ("data", "requires_grad", "name", "_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name
        self._grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray):
        self._grad = np.asarray(value, dtype=self.data.dtype)

    @property
    def has_grad(self) -> bool:
        return self._grad is not None

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"ValueNode{label}(shape={self.shape}, dtype={self.data.dtype})"


def parameter(data, name: str = "", dtype=np.float32) -> ValueNode:
    """Creates a trainable leaf."""
    return ValueNode(data, requires_grad=True, name=name, dtype=dtype)


def constant(data, dtype=np.float32) -> ValueNode:
    return ValueNode(data, requires_grad=False, dtype=dtype)


def _dtype(*nodes: ValueNode):
    if any(node.data.dtype == np.float64 for node in nodes):
        return np.float64
    return np.float32


def _accumulate(node: ValueNode, grad: np.ndarray):
    if not node.requires_grad:
        return
    if node._grad is None:
        node._grad = np.array(grad, dtype=node.data.dtype)
    else:
        node._grad += grad.astype(node.data.dtype, copy=False)


def _result(data: np.ndarray, parents: Sequence[ValueNode], backward_fn, dtype) -> ValueNode:
    needs_grad = grad_enabled() and any(p.requires_grad for p in parents)
    out = ValueNode(data, requires_grad=needs_grad, dtype=dtype)
    if needs_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# Forward suite


def matmul(a: ValueNode, b: ValueNode) -> ValueNode:
    """
    Matrix product with 64-bit accumulation.

    Supports a (..., n, k) @ b (k, m) (shared weight) and batched
    a (..., n, k) @ b (..., k, m) with identical leading dimensions.

    Raises:
        ValueError: If the operand shapes are incompatible.
    """
    compatible = (
        a.ndim >= 2
        and b.ndim >= 2
        and a.shape[-1] == b.shape[-2]
        and (b.ndim == 2 or a.shape[:-2] == b.shape[:-2])
    )
    if not compatible:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    dtype = _dtype(a, b)
    out = np.matmul(a.data, b.data, dtype=np.float64).astype(dtype)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2), dtype=np.float64))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g, dtype=np.float64)
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
            _accumulate(b, gb)

    return _result(out, (a, b), backward_fn, dtype)


def add(a: ValueNode, b: ValueNode) -> ValueNode:
    """Elementwise sum; b may also be a bias vector over the last axis of a."""
    if a.shape == b.shape:
        bias = False
    elif b.ndim == 1 and a.shape[-1:] == b.shape:
        bias = True
    else:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    dtype = _dtype(a, b)
    out = (a.data + b.data).astype(dtype, copy=False)

    def backward_fn(g):
        _accumulate(a, g)
        if bias:
            _accumulate(b, np.sum(g.reshape(-1, b.shape[0]), axis=0, dtype=np.float64))
        else:
            _accumulate(b, g)

    return _result(out, (a, b), backward_fn, dtype)


def mul(a: ValueNode, b: ValueNode) -> ValueNode:
    if a.shape != b.shape:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    dtype = _dtype(a, b)
    out = (a.data * b.data).astype(dtype, copy=False)

    def backward_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(out, (a, b), backward_fn, dtype)


def scale(a: ValueNode, c: float) -> ValueNode:
    dtype = _dtype(a)
    out = (a.data * c).astype(dtype, copy=False)

    def backward_fn(g):
        _accumulate(a, g * c)

    return _result(out, (a,), backward_fn, dtype)


def sum(a: ValueNode) -> ValueNode:
    """Sum of all entries, returned as a scalar node."""
    dtype = _dtype(a)
    out = np.asarray(np.sum(a.data, dtype=np.float64), dtype=dtype)

    def backward_fn(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(out, (a,), backward_fn, dtype)


def reshape(a: ValueNode, shape: Sequence[int]) -> ValueNode:
    dtype = _dtype(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward_fn(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(out, (a,), backward_fn, dtype)


def transpose(a: ValueNode, axes: Sequence[int]) -> ValueNode:
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: axes {tuple(axes)} do not permute shape {a.shape}")
    dtype = _dtype(a)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = np.argsort(axes)

    def backward_fn(g):
        _accumulate(a, np.transpose(g, inverse))

    return _result(out, (a,), backward_fn, dtype)


def softmax(a: ValueNode) -> ValueNode:
    """Softmax over the last axis, computed in 64-bit."""
    dtype = _dtype(a)
    x = a.data.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        _accumulate(a, s * (g - np.sum(g * s, axis=-1, keepdims=True)))

    return _result(s.astype(dtype), (a,), backward_fn, dtype)


def layer_norm(x: ValueNode, gamma: ValueNode, beta: ValueNode, eps: float = 1e-5) -> ValueNode:
    """
    Layer normalization over the last axis followed by the affine map.

    Args:
        x (ValueNode): Input of shape (..., d).
        gamma (ValueNode): Scale, shape (d,).
        beta (ValueNode): Shift, shape (d,).
        eps (float): Variance floor.

    Returns:
        ValueNode: Normalized activations of the same shape as x.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm: incompatible shapes {x.shape} and {gamma.shape}/{beta.shape}"
        )
    dtype = _dtype(x, gamma, beta)
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward_fn(g):
        g = g.astype(np.float64)
        flat_g = g.reshape(-1, d)
        _accumulate(gamma, np.sum(flat_g * xhat.reshape(-1, d), axis=0))
        _accumulate(beta, np.sum(flat_g, axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, dx)

    return _result(out.astype(dtype), (x, gamma, beta), backward_fn, dtype)


def gelu(a: ValueNode) -> ValueNode:
    """GELU, tanh approximation."""
    dtype = _dtype(a)
    x = a.data.astype(np.float64)
    t = np.tanh(GELU_C * (x + 0.044715 * x**3))
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        dt = (1.0 - t**2) * GELU_C * (1.0 + 3 * 0.044715 * x**2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return _result(out.astype(dtype), (a,), backward_fn, dtype)


def embedding(weight: ValueNode, ids: np.ndarray) -> ValueNode:
    """Row lookup: weight (V, d) indexed by integer ids of any shape."""
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ValueError(f"embedding: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(
            f"embedding: ids out of range for table {weight.shape} (max id {int(ids.max())})"
        )
    dtype = _dtype(weight)
    out = weight.data[ids]

    def backward_fn(g):
        gw = np.zeros(weight.shape, dtype=np.float64)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accumulate(weight, gw)

    return _result(out, (weight,), backward_fn, dtype)


def causal_attention_scores(q: ValueNode, k: ValueNode) -> ValueNode:
    """
    Scaled dot-product scores q·kᵀ/√d with positions j > i masked.

    Masked entries hold MASK_VALUE so the result stays finite and the
    following softmax assigns them zero weight.
    """
    if q.shape != k.shape or q.ndim < 2:
        raise ValueError(f"causal_attention_scores: incompatible shapes {q.shape} and {k.shape}")
    dtype = _dtype(q, k)
    seq, head_dim = q.shape[-2], q.shape[-1]
    factor = 1.0 / math.sqrt(head_dim)
    mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2), dtype=np.float64) * factor
    scores = np.where(mask, MASK_VALUE, scores)

    def backward_fn(g):
        gm = np.where(mask, 0.0, g) * factor
        if q.requires_grad:
            _accumulate(q, np.matmul(gm, k.data, dtype=np.float64))
        if k.requires_grad:
            _accumulate(k, np.matmul(np.swapaxes(gm, -1, -2), q.data, dtype=np.float64))

    return _result(scores.astype(dtype), (q, k), backward_fn, dtype)


def cross_entropy(logits: ValueNode, targets: np.ndarray, ignore_index: Optional[int] = None) -> ValueNode:
    """
    Mean negative log-likelihood of the targets under softmax(logits).

    Args:
        logits (ValueNode): Scores of shape (N, V).
        targets (np.ndarray): Integer targets of shape (N,).
        ignore_index (int, optional): Target id (padding) excluded from the mean.

    Returns:
        ValueNode: Scalar loss.

    Raises:
        ValueError: On shape mismatch, out-of-range targets or when every
            target is padding.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: incompatible shapes {logits.shape} and {targets.shape}")
    vocab = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"cross_entropy: target ids out of range for vocabulary of {vocab}")
    mask = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: no non-padding target positions")

    dtype = _dtype(logits)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(targets.shape[0])
    nll = -log_probs[rows, targets]
    loss = np.sum(nll[mask], dtype=np.float64) / count

    def backward_fn(g):
        probs = np.exp(log_probs)
        probs[rows, targets] -= 1.0
        probs *= mask[:, None] / count
        _accumulate(logits, probs * g)

    return _result(np.asarray(loss, dtype=dtype), (logits,), backward_fn, dtype)


def _topological_order(root: ValueNode) -> list[ValueNode]:
    order: list[ValueNode] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: ValueNode) -> None:
    """
    Populates the gradients of every leaf reachable from a scalar loss.

    Nodes are visited once each, in reverse topological order. A constant
    loss (no trainable ancestors) leaves every gradient at zero.

    Args:
        loss (ValueNode): Scalar produced by the forward suite.

    Raises:
        ValueError: If the loss is not a scalar.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss._grad = np.ones_like(loss.data)
    for node in reversed(_topological_order(loss)):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)
