"""Dense fp64 tensors with a dynamically recorded computation tape."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from magrec.errors import ContractError

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


_F = None


def _functional():
    # functional imports this module, so bind it on first use
    global _F
    if _F is None:
        from magrec.autograd import functional
        _F = functional
    return _F


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A dense float64 array plus the bookkeeping reverse mode needs.

    Tensors produced by an operation on at least one ``requires_grad`` input
    keep references to their inputs and a backward rule mapping the output
    gradient to one gradient per input.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_inputs", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, inputs: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        out.grad = None
        out.name = None
        out._consumed = False
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._inputs = tuple(inputs)
            out._backward = backward
        else:
            out.requires_grad = False
            out._inputs = ()
            out._backward = None
        return out

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; the implementations live in functional
    def __add__(self, other):
        F = _functional()
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        F = _functional()
        return F.sub(self, other)

    def __rsub__(self, other):
        F = _functional()
        return F.sub(other, self)

    def __mul__(self, other):
        F = _functional()
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        F = _functional()
        return F.div(self, other)

    def __rtruediv__(self, other):
        F = _functional()
        return F.div(other, self)

    def __neg__(self):
        F = _functional()
        return F.mul(self, -1.0)

    def __pow__(self, exponent: float):
        F = _functional()
        return F.power(self, exponent)

    def __matmul__(self, other):
        F = _functional()
        return F.matmul(self, other)

    @property
    def T(self) -> "Tensor":
        F = _functional()
        return F.transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        F = _functional()
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        F = _functional()
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        F = _functional()
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Recorded operations reachable from one output, in topological order.

    The tape is single use: once :meth:`run` has propagated gradients, the
    intermediate references are released and running it again raises.
    """

    def __init__(self, nodes: list[Tensor], output: Tensor):
        self.nodes = nodes
        self.output = output

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order, output)

    def run(self, seed_grad: np.ndarray) -> None:
        if self.output._consumed:
            raise ContractError("tape already consumed; re-run the forward pass before calling backward again")
        grads: dict[int, np.ndarray] = {id(self.output): seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = node._backward(g)
            for parent, pg in zip(node._inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in self.nodes:
            if node._backward is not None:
                node._inputs = ()
                node._backward = None
                node._consumed = True
        self.output._consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("tape already consumed; re-run the forward pass before calling backward again")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    Tape.from_output(loss).run(np.ones_like(loss.data))


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
