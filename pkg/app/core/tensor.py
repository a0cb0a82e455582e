"""
Tape-based reverse-mode automatic differentiation over dense NCHW arrays
"""
import itertools
import logging
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import ShapeError


logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64
SCALAR_SHAPE = (1, 1, 1, 1)

_node_ids = itertools.count(1)
_active_tape: Optional["Tape"] = None
_grad_enabled = True


class Variable:
    """
    A value plus its gradient slot and tape handle.

    Leaves (parameters, inputs) have no tape; every recorded operation output
    points at the tape that holds its backward rule.
    """

    __slots__ = ("value", "grad", "node_id", "requires_grad", "tape", "name")

    def __init__(self, value: Any, requires_grad: bool = False, name: str = ""):
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(DEFAULT_DTYPE)
        self.value: np.ndarray = value
        self.grad: Optional[np.ndarray] = None
        self.node_id: int = next(_node_ids)
        self.requires_grad = requires_grad
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Variable":
        """Same value, cut from the tape"""
        return Variable(self.value, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> Dict[int, np.ndarray]:
        return backward(self)

    def sum(self) -> "Variable":
        return Sum.apply(self)

    def mean(self) -> "Variable":
        return Mean.apply(self)

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        if isinstance(other, Variable):
            raise TypeError("Division by a Variable is not supported")
        return Mul.apply(self, 1.0 / other)

    def __neg__(self):
        return Neg.apply(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def parameter(value: Any, name: str = "") -> Variable:
    return Variable(np.array(value, copy=True), requires_grad=True, name=name)


def as_variable(value: Any) -> Variable:
    if isinstance(value, Variable):
        return value
    return Variable(value, requires_grad=False)


class TapeEntry(NamedTuple):
    function: "Function"
    inputs: Tuple[Optional[Variable], ...]
    output: Variable


class Tape:
    """Ordered record of operations; inputs always precede their consumers"""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._previous: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        global _active_tape
        self._previous = _active_tape
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = self._previous
        self._previous = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, function: "Function", inputs: Tuple[Optional[Variable], ...], output: Variable) -> None:
        output.tape = self
        self.entries.append(TapeEntry(function, inputs, output))

    def absorb(self, other: "Tape") -> None:
        """Move another tape's entries here; both graphs were independent so order stays topological"""
        for entry in other.entries:
            entry.output.tape = self
        self.entries.extend(other.entries)
        other.entries = []

    def backward(self, loss: Variable) -> Dict[int, np.ndarray]:
        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
        leaves: Dict[int, Variable] = {}

        for entry in reversed(self.entries):
            grad = grads.pop(entry.output.node_id, None)
            if grad is None:
                continue
            input_grads = entry.function.backward(grad)
            for inp, inp_grad in zip(entry.inputs, input_grads):
                if inp is None or inp_grad is None or not inp.requires_grad:
                    continue
                if inp_grad.shape != inp.shape:
                    raise ShapeError(
                        f"{entry.function.name}: backward produced gradient of shape {inp_grad.shape} "
                        f"for input of shape {inp.shape}"
                    )
                if inp.node_id in grads:
                    grads[inp.node_id] = grads[inp.node_id] + inp_grad
                else:
                    grads[inp.node_id] = inp_grad
                if inp.tape is None:
                    leaves[inp.node_id] = inp

        for node_id, leaf in leaves.items():
            grad = grads[node_id]
            leaf.grad = np.array(grad, copy=True) if leaf.grad is None else leaf.grad + grad
        return {node_id: leaf.grad for node_id, leaf in leaves.items()}


def _resolve_tape(inputs: Sequence[Optional[Variable]]) -> Tape:
    tapes: List[Tape] = []
    for inp in inputs:
        if inp is not None and inp.tape is not None and all(t is not inp.tape for t in tapes):
            tapes.append(inp.tape)

    if _active_tape is not None:
        target = _active_tape
    elif tapes:
        target = tapes[0]
    else:
        target = Tape()

    for tape in tapes:
        if tape is not target:
            target.absorb(tape)
    return target


def backward(loss: Variable) -> Dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf reachable from loss"""
    if loss.shape != SCALAR_SHAPE:
        raise ShapeError(f"backward: loss must have shape {SCALAR_SHAPE}, got {loss.shape}")
    if loss.tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.value) if loss.grad is None else loss.grad + 1.0
            return {loss.node_id: loss.grad}
        return {}
    return loss.tape.backward(loss)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording anything on a tape"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays (saving whatever backward
    needs on `self`) and `backward`, which maps d(loss)/d(output) to one
    gradient per input (None where an input needs none).
    """

    name = "function"

    def __init__(self):
        self.needs_grad: Tuple[bool, ...] = ()

    def forward(self, *arrays: Optional[np.ndarray], **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Variable:
        variables = tuple(None if x is None else as_variable(x) for x in inputs)
        func = cls()
        func.needs_grad = tuple(v is not None and v.requires_grad for v in variables)
        out_value = func.forward(*(None if v is None else v.value for v in variables), **kwargs)

        requires_grad = _grad_enabled and any(func.needs_grad)
        out = Variable(out_value, requires_grad=requires_grad)
        if requires_grad:
            _resolve_tape(variables).record(func, variables, out)
        return out


def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches to_shape"""
    if grad.shape == to_shape:
        return grad
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(to_shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        grad_a = unbroadcast(grad * self.b, self.a.shape) if self.needs_grad[0] else None
        grad_b = unbroadcast(grad * self.a, self.b.shape) if self.needs_grad[1] else None
        return grad_a, grad_b


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Sum(Function):
    """Sum of every element, returned as a 1x1x1x1 scalar"""

    name = "sum"

    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype).reshape(SCALAR_SHAPE)

    def backward(self, grad):
        return (np.full(self.shape, grad.reshape(-1)[0], dtype=grad.dtype),)


class Mean(Function):
    """Mean of every element, returned as a 1x1x1x1 scalar"""

    name = "mean"

    def forward(self, a):
        if a.size == 0:
            raise ShapeError("mean: empty input")
        self.shape = a.shape
        return np.asarray(a.mean(), dtype=a.dtype).reshape(SCALAR_SHAPE)

    def backward(self, grad):
        count = int(np.prod(self.shape))
        return (np.full(self.shape, grad.reshape(-1)[0] / count, dtype=grad.dtype),)
