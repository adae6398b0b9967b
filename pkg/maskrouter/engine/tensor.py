# maskrouter/engine/tensor.py
"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops record a node on the active ``Tape`` when any input requires a gradient.
With no active tape nothing is recorded, which is how evaluation runs.
Shapes must match exactly; the only broadcast is a 1-D bias added over rows.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from maskrouter.utils.errors import ContractError, DimensionError, LabelIndexError

DTYPE = np.float64

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], None]


@dataclass
class Tape:
    """Ordered record of differentiable ops; parents always precede children"""

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> None:
        self.nodes.append(Node(out, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.out.grad is None:
                continue
            node.backward_fn(node.out.grad)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``"""
    tape = _active_tape.get()
    if tape is None:
        raise ContractError("backward called without an active tape")
    tape.backward(loss)


def apply_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as an op output and record it when a gradient is needed.

    ``backward_fn(grad_out)`` must accumulate into the parents that require grad.
    """
    needs_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad)
    tape = _active_tape.get()
    if needs_grad and tape is not None:
        tape.record(out, tuple(parents), backward_fn)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} vs {b.shape}")

    def _backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return apply_op(a.data @ b.data, (a, b), _backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N]"""
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise DimensionError(f"bmm shape mismatch: {a.shape} vs {b.shape}")

    def _backward(g):
        if a.requires_grad:
            a.accumulate(np.matmul(g, b.data.transpose(0, 2, 1)))
        if b.requires_grad:
            b.accumulate(np.matmul(a.data.transpose(0, 2, 1), g))

    return apply_op(np.matmul(a.data, b.data), (a, b), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias over the last axis"""
    is_bias = b.data.ndim == 1 and a.data.ndim >= 1 and a.shape != b.shape and a.shape[-1] == b.shape[0]
    if not is_bias:
        _check_same_shape("add", a, b)

    def _backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.reshape(-1, b.shape[0]).sum(axis=0) if is_bias else g)

    return apply_op(a.data + b.data, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def _backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return apply_op(a.data * b.data, (a, b), _backward)


def scale(a: Tensor, c: float) -> Tensor:
    def _backward(g):
        a.accumulate(g * c)

    return apply_op(a.data * c, (a,), _backward)


def relu(a: Tensor) -> Tensor:
    def _backward(g):
        a.accumulate(g * (a.data > 0))

    return apply_op(np.maximum(a.data, 0.0), (a,), _backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    y = exps / np.sum(exps, axis=axis, keepdims=True)

    def _backward(g):
        x.accumulate(y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return apply_op(y, (x,), _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine gamma/beta"""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} do not match last axis {d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def _backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * x_hat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            g_hat = g * gamma.data
            x.accumulate(inv_std * (
                g_hat
                - g_hat.mean(axis=-1, keepdims=True)
                - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
            ))

    return apply_op(x_hat * gamma.data + beta.data, (x, gamma, beta), _backward)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)"""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    batch, n_classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise DimensionError(f"cross_entropy labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelIndexError(f"label out of range [0, {n_classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    loss = np.mean(log_z - shifted[rows, labels])

    def _backward(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, labels] -= 1.0
        logits.accumulate(probs * (g.reshape(()) / batch))

    return apply_op(np.array(loss), (logits,), _backward)


def sum_all(x: Tensor) -> Tensor:
    def _backward(g):
        x.accumulate(np.broadcast_to(g, x.shape).copy())

    return apply_op(np.array(x.data.sum()), (x,), _backward)


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]

    def _backward(g):
        x.accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy())

    return apply_op(x.data.mean(axis=axis), (x,), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def _backward(g):
        x.accumulate(g.reshape(x.shape))

    return apply_op(x.data.reshape(shape), (x,), _backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def _backward(g):
        x.accumulate(g.transpose(inverse))

    return apply_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), _backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` of any shape"""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise LabelIndexError(f"embedding index out of range [0, {table.shape[0]})")

    def _backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table.accumulate(grad)

    return apply_op(table.data[ids], (table,), _backward)
