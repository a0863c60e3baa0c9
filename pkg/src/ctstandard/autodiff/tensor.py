"""Dense tensors and the gradient tape.

A :class:`Tensor` wraps a numpy array. Operations from
:mod:`ctstandard.autodiff.functional` record themselves on the active
:class:`Tape` whenever at least one input requires a gradient, and
:func:`backward` replays the tape in reverse.

Tapes are thread confined: the active-tape stack lives in a
``threading.local`` so distinct threads can record independently.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NotScalarError(ValueError):
    """Raised when ``backward`` is asked to start from a non-scalar tensor."""


class Tensor:
    """An n-dimensional array that can take part in reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # arithmetic sugar; implementations live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __truediv__(self, other):
        from . import functional as F
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return F.mul(self, 1.0 / float(other))


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: VJP
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager::

        with Tape() as tape:
            loss = F.sum(F.mul(a, a))
        grads = backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], vjp: VJP) -> None:
        self.nodes.append(Node(inputs, output, vjp, op))


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def make_output(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    """Wrap ``data`` as an op output and record it if gradients are needed."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, out, inputs, vjp)
    return out


def backward(loss: Tensor, tape: Tape) -> Dict[Tensor, np.ndarray]:
    """Reverse pass from a scalar ``loss`` over ``tape``.

    Returns a mapping from every ``requires_grad`` tensor reached to its
    gradient, and also stores the gradient on ``tensor.grad``. Tensors not
    reachable from ``loss`` are absent from the mapping.
    """
    if loss.data.size != 1:
        raise NotScalarError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    recorded = any(node.output is loss for node in reversed(tape.nodes))
    if not recorded:
        raise ValueError("loss was not recorded on this tape")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    produced = {id(node.output) for node in tape.nodes}

    for node in reversed(tape.nodes):
        g_out = pending.pop(id(node.output), None)
        if g_out is None:
            continue
        grads = node.vjp(g_out)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise ShapeError(f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}")
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + g
            else:
                pending[key] = g
            if key not in produced:
                leaves[key] = inp

    result: Dict[Tensor, np.ndarray] = {}
    for key, tensor in leaves.items():
        g = pending.get(key)
        if g is None:
            continue
        g = g.astype(tensor.dtype, copy=False)
        tensor.grad = g
        result[tensor] = g
    return result
