"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the active
:class:`ComputationTape`; :func:`backward` replays the tape in reverse,
summing gradients into inputs that are used more than once.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_PRECISION = {"dtype": np.float64 if os.environ.get("PSTK_F64") == "1" else np.float32}


def default_dtype() -> np.dtype:
    return np.dtype(_PRECISION["dtype"])


def set_precision(bits: int) -> None:
    """Switch the global float width: 64 for verification, 32 for training."""
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")
    _PRECISION["dtype"] = np.float64 if bits == 64 else np.float32


@contextmanager
def precision(bits: int) -> Iterator[None]:
    old = _PRECISION["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _PRECISION["dtype"] = old


class Tensor:
    """N-dimensional real array that can carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "velocity", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.velocity: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass(eq=False)
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class ComputationTape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
        if not self.enabled or not any(t.requires_grad for t in inputs):
            return out
        out.requires_grad = True
        node = Node(out, tuple(inputs), backward_fn, op)
        out._node = node
        self.nodes.append(node)
        return out

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not require grad; nothing to differentiate")
        if loss._node is not None and loss._node not in self.nodes:
            raise ValueError("loss was not recorded on the active tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left has no producer on this tape
        leaves = {id(t): t for n in self.nodes for t in n.inputs}
        leaves[id(loss)] = loss
        for key, g in grads.items():
            leaf = leaves.get(key)
            if leaf is None:
                continue
            leaf.grad = g.astype(leaf.dtype, copy=True) if leaf.grad is None else leaf.grad + g
        if not retain:
            self.clear()


_local = threading.local()


def _stack() -> list[ComputationTape]:
    if not hasattr(_local, "stack"):
        _local.stack = [ComputationTape()]
    return _local.stack


def active_tape() -> ComputationTape:
    return _stack()[-1]


@contextmanager
def tape_scope(tape: ComputationTape | None = None) -> Iterator[ComputationTape]:
    """Record onto a fresh (or given) tape for the duration of the block."""
    tape = ComputationTape() if tape is None else tape
    _stack().append(tape)
    try:
        yield tape
    finally:
        _stack().pop()


@contextmanager
def no_grad() -> Iterator[None]:
    tape = active_tape()
    old = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = old


def backward(loss: Tensor, retain: bool = False) -> None:
    """Populate ``.grad`` on everything the scalar ``loss`` depends on."""
    active_tape().backward(loss, retain=retain)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, dtype=np.result_type(a.dtype, b.dtype))
    return active_tape().record(
        "add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, dtype=np.result_type(a.dtype, b.dtype))
    return active_tape().record(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return active_tape().record("neg", Tensor(-a.data, dtype=a.dtype), (a,), lambda g: (-g,))


def tensor_sum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), dtype=a.dtype)
    return active_tape().record(
        "sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),)
    )
