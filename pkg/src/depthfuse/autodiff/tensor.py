"""Dense tensors with reverse-mode differentiation.

Every differentiable op produces a :class:`Tensor` that remembers the op that
created it. Calling :func:`backward` on a scalar walks that graph once in
reverse topological order (the :class:`GradTape`) and deposits gradients in
the ``grad`` buffers of leaf tensors. A graph can be consumed only once; run
the forward pass again to get a fresh one.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_check_finite = os.environ.get("DEPTHFUSE_CHECK_FINITE", "0") not in ("", "0", "false")


class ShapeError(ValueError):
    """Operand shapes are incompatible with an op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached an op boundary while finiteness checks are on."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (untaped loss, double backward)."""


def set_check_finite(enabled: bool) -> bool:
    """Toggle NaN/Inf checks at op boundaries; returns the previous setting."""
    global _check_finite
    previous = _check_finite
    _check_finite = bool(enabled)
    return previous


def check_finite_enabled() -> bool:
    return _check_finite


def _assert_finite(array: np.ndarray, where: str) -> None:
    if _check_finite and not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Node:
    """Record of one op application: its inputs and how to pull gradients back."""

    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """A dense array plus an optional gradient buffer.

    Storage defaults to 32-bit floats. 64-bit tensors are allowed and flow
    through every op unchanged, which is what gradient checking relies on.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(DEFAULT_DTYPE)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar; the real work lives in ops ------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.subtract(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.divide(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self) -> "Tensor":
        from . import ops
        return ops.sum(self)

    def mean(self) -> "Tensor":
        from . import ops
        return ops.mean(self)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]],
                dtype=None) -> Tensor:
    """Wrap an op's output, attaching a graph node when any input needs grad.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or None) per entry of ``inputs``.
    """
    if dtype is None:
        dtype = inputs[0].dtype if inputs else DEFAULT_DTYPE
    out = Tensor(np.asarray(data, dtype=dtype))
    _assert_finite(out.data, op)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward_fn)
    return out


class GradTape:
    """Ops reachable from a loss, ordered so every op follows its inputs."""

    def __init__(self, records: list):
        self.records = records

    @classmethod
    def from_loss(cls, loss: Tensor) -> "GradTape":
        order: list = []
        seen: set = set()
        stack = [(loss, False)]
        while stack:
            tensor, expanded = stack.pop()
            node = tensor._node
            if node is None:
                continue
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            stack.append((tensor, True))
            for parent in node.inputs:
                if parent._node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)

    def run(self, loss: Tensor) -> None:
        grads = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        for tensor in reversed(self.records):
            node = tensor._node
            upstream = grads.pop(id(tensor), None)
            node.consumed = True
            if upstream is None:
                continue
            input_grads = node.backward_fn(upstream)
            for parent, g in zip(node.inputs, input_grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {g.shape} != input shape {parent.shape}")
                if parent._node is None:
                    _accumulate_leaf(parent, g)
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = np.asarray(g, dtype=np.float64)
            # drop closures (and the activations they hold) once used
            node.backward_fn = _spent


def _spent(_):
    raise GraphError("graph already consumed by an earlier backward()")


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.dtype)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = (leaf.grad.astype(np.float64) + g).astype(leaf.dtype)


def backward(loss: Tensor) -> GradTape:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward() expects a Tensor")
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise GraphError("loss was not produced by taped ops (nothing requires grad)")
    if loss._node.consumed:
        raise GraphError("graph already consumed; re-run the forward pass before backward()")
    tape = GradTape.from_loss(loss)
    tape.run(loss)
    return tape
