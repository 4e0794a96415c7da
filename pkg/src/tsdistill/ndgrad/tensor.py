"""Dense tensor with a tape-based reverse-mode gradient engine.

Operations record themselves on the innermost active :class:`Tape`.  Outside
of a tape nothing is recorded, which makes teacher/evaluation passes free of
autodiff bookkeeping.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()
_debug = os.environ.get("NDGRAD_DEBUG", "") not in ("", "0")


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's preconditions."""


def set_debug(flag: bool) -> None:
    """Toggle finiteness assertions after every forward op."""
    global _debug
    _debug = bool(flag)


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None:
        if data.dtype in (np.float32, np.float64):
            return data
        return data.astype(DEFAULT_DTYPE)
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class no_grad:
    """Suspend recording, even inside an enclosing tape."""

    def __enter__(self) -> "no_grad":
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


class Tensor:
    """n-dimensional array with an optional gradient slot.

    Float arrays keep their dtype (so float64 checks stay float64); anything
    else is converted to float32.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis)

    def mean(self, axis=None):
        from . import functional as F
        return F.mean(self, axis)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        return F.transpose(self, axes or None)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed ops.

    Execution order is a topological order of the graph, so replaying the
    record in reverse visits every op once, after all of its consumers.

    Example::

        with Tape() as tape:
            loss = F.smooth_l1(model(x), y)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        out._tape = self
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor, retain_graph: bool = False) -> None:
        backward(loss, self, retain_graph)

    def release(self) -> None:
        """Drop recorded nodes (breaks the tensor <-> tape reference cycle)."""
        for node in self.nodes:
            node.out._tape = None
        self.nodes.clear()


def backward(loss: Tensor, tape: Tape, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate (``+=``) so callers must clear them between
    steps.  Tensors not reachable from ``loss`` keep whatever grad they had.
    The tape is released afterwards unless ``retain_graph`` is set.
    """
    try:
        _run_backward(loss, tape)
    finally:
        if not retain_graph:
            tape.release()


def _run_backward(loss: Tensor, tape: Tape) -> None:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending = {id(loss): np.ones_like(loss.data)}
    if loss._tape is not tape:
        # loss is itself a leaf
        if loss.requires_grad:
            _accumulate(loss, pending[id(loss)])
        return
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is tape:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            else:
                _accumulate(inp, gi)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def make_result(data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op's output, recording it on the active tape if needed."""
    if _debug and not np.all(np.isfinite(data)):
        finite_in = all(np.all(np.isfinite(t.data)) for t in inputs)
        if finite_in:
            raise FloatingPointError("non-finite output from finite inputs")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))
