"""
自动微分核心
Reverse-Mode Autodiff Core

这个模块提供 Tensor 值类型、Tape 记录器、反向传播以及逐元素原语
Provides the Tensor value type, the Tape recorder, backward() and the
elementwise primitives every other op is built from.
"""

import itertools
import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, GradientError, NumericalError

logger = logging.getLogger(__name__)

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_ids = itertools.count()
_default_dtype: ContextVar = ContextVar('default_dtype', default=np.dtype(np.float32))
_active_tape: ContextVar = ContextVar('active_tape', default=None)
_flop_counter: ContextVar = ContextVar('flop_counter', default=None)


def get_default_dtype() -> np.dtype:
    """Dtype used for tensors built from Python scalars and lists."""
    return _default_dtype.get()


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the default dtype (float64 for gradient verification)."""
    token = _default_dtype.set(np.dtype(dtype))
    try:
        yield
    finally:
        _default_dtype.reset(token)


class Tensor:
    """Dense N-dimensional array with an optional gradient."""

    # ndarray op Tensor must dispatch to the Tensor reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            target = np.dtype(dtype)
        elif isinstance(data, np.ndarray) and arr.dtype in _FLOAT_DTYPES:
            target = arr.dtype
        else:
            target = get_default_dtype()
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=target)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.id = next(_ids)

    # --- convenience ---
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{req}{nm})"

    # --- operators ---
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class TapeRecord:
    """One recorded primitive: op kind, inputs, output and its backward closure."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of executed primitives.

    Used as a context manager; primitives executed inside ``with Tape() as tape``
    are recorded when any of their inputs requires a gradient.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._produced: set[int] = set()
        self._retained: Dict[int, Tensor] = {}
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._tokens.pop())
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward) -> None:
        if output.id in self._produced:
            raise GradientError('tensor produced twice on one tape', {'op': op, 'id': output.id})
        self._produced.add(output.id)
        self.records.append(TapeRecord(op, inputs, output, backward))

    def produced(self, tensor: Tensor) -> bool:
        return tensor.id in self._produced

    def retain(self, tensor: Tensor) -> Tensor:
        """Gradient tap: keep dLoss/dTensor on an intermediate after backward."""
        self._retained[tensor.id] = tensor
        return tensor


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


@contextmanager
def no_grad():
    """Run primitives without recording, even inside an active tape."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


class FlopCounter:
    """Multiply-accumulate counts per op kind."""

    def __init__(self):
        self.by_op: Dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.by_op.values())

    def add(self, op: str, count: int) -> None:
        self.by_op[op] = self.by_op.get(op, 0) + int(count)


@contextmanager
def count_flops():
    counter = FlopCounter()
    token = _flop_counter.set(counter)
    try:
        yield counter
    finally:
        _flop_counter.reset(token)


def add_flops(op: str, count: int) -> None:
    counter = _flop_counter.get()
    if counter is not None:
        counter.add(op, count)


def apply_op(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, backward) -> Tensor:
    """
    Wrap a forward result as a Tensor and record it on the active tape.

    Args:
        op: Op kind, used in diagnostics.
        inputs: Input tensors, in the order ``backward`` returns gradients for.
        out: Forward value.
        backward: Callable mapping dLoss/dOut to a sequence of input gradients (None to skip).
    """
    if not np.all(np.isfinite(out)):
        raise NumericalError(f'non-finite output from {op}', {'op': op, 'shape': list(np.shape(out))})
    tape = _active_tape.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(np.asarray(out), requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, result, backward)
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """
    Populate ``.grad`` of every requires_grad leaf reachable from ``loss``.

    Gradients accumulate additively into existing ``.grad`` arrays; callers zero
    them between optimizer steps.
    """
    if loss.size != 1:
        raise GradientError('backward needs a scalar loss', {'shape': list(loss.shape)})
    if not tape.produced(loss):
        raise GradientError('loss is not on the tape (detached graph)')

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.id, None)
        if g is None:
            continue
        if rec.output.id in tape._retained:
            rec.output.grad = g.copy()
        input_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise DimensionError(f'gradient shape mismatch in {rec.op}',
                                     {'expected': list(inp.shape), 'got': list(gi.shape)})
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
            if not tape.produced(inp):
                leaves[inp.id] = inp

    for tid, leaf in leaves.items():
        g = np.asarray(grads[tid], dtype=leaf.dtype)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    loss.grad = np.ones_like(loss.data)


# ==================== 逐元素原语 ====================

def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op('add', (a, b), a.data + b.data,
                    lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op('sub', (a, b), a.data - b.data,
                    lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op('mul', (a, b), a.data * b.data,
                    lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return apply_op('div', (a, b), a.data / b.data, _backward)


def neg(a: Tensor) -> Tensor:
    return apply_op('neg', (a,), -a.data, lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return apply_op('pow', (a,), a.data ** p, lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op('exp', (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return apply_op('log', (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return apply_op('sqrt', (a,), out, lambda g: (g * 0.5 / out,))


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return apply_op('sum', (a,), out, lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(np.size(out), 1)
    return apply_op('mean', (a,), out,
                    lambda g: (_expand_reduced(g / count, a.shape, axis, keepdims),))


def reshape(a: Tensor, shape) -> Tensor:
    return apply_op('reshape', (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply_op('relu', (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function, clipped strictly inside (0, 1)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(x.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg)


def sigmoid(a: Tensor) -> Tensor:
    out = stable_sigmoid(a.data)
    return apply_op('sigmoid', (a,), out, lambda g: (g * out * (1.0 - out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return apply_op('clip', (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))
