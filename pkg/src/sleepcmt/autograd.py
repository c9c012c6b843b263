"""Reverse-mode automatic differentiation on top of numpy.

Operations are recorded onto the active :class:`Tape` (entered with a
``with`` block).  Outside a tape nothing is recorded, which is how inference
runs without paying for graph bookkeeping::

    with Tape() as tape:
        loss = model.loss(x, y)
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import UsageError

_state = threading.local()
_debug = False


def set_debug(enabled: bool) -> None:
    """Turn on NaN/Inf checks after every recorded forward op."""
    global _debug
    _debug = bool(enabled)


def debug_enabled() -> bool:
    return _debug


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional array with an optional gradient.

    ``data`` is a C-contiguous numpy array; ``grad`` (when populated) has the
    same shape and dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the implementations live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order of the graph.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tape stack corrupted: tapes must be exited in LIFO order")
        stack.pop()

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn, op: str) -> None:
        self.nodes.append(Node(output, inputs, backward, op))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)

    def clear(self) -> None:
        self.nodes.clear()
        self._produced.clear()


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate additively into existing ``.grad`` arrays, so
    callers zero them between optimisation steps.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise UsageError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        g_inputs = node.backward(g_out)
        for inp, g in zip(node.inputs, g_inputs):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise UsageError(f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}")
            key = id(inp)
            if key in tape._produced:
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
            elif inp.grad is None:
                inp.grad = np.array(g, dtype=inp.dtype, copy=True)
            else:
                inp.grad += g


def record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``out_data`` as a Tensor and, if a tape is active, log the op."""
    if _debug and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn, op)
    return out
