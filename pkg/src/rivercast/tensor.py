"""Dense float64 tensors with reverse-mode automatic differentiation.

Gradients are tracked on an explicit tape: operations executed inside a
``with Tape():`` block record their backward rules in execution order, and
``backward(loss)`` replays them in exact reverse. Outside a tape, every
operation is a plain numpy forward pass. A tape and the tensors recorded on
it belong to one thread; independent tapes on different threads never share
state.

There is no implicit broadcasting: binary operations require identical
shapes, and the only scalar coupling is multiplication by a Python constant.
Model code reshapes explicitly.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "absolute",
    "sigmoid",
    "tanh",
    "scale",
    "matmul",
    "sum_all",
    "l1_loss",
    "concat",
    "slice_axis",
    "reshape",
    "stack",
    "transpose",
    "repeat_rows",
    "zeros",
]


class Tensor:
    """N-dimensional float64 array, optionally participating in autodiff.

    ``data`` is always a C-contiguous float64 ndarray; ``grad`` is filled in
    by ``backward`` for tensors created with ``requires_grad=True`` and for
    intermediates while a tape is replayed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_tape_gen")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._tape_gen = 0

    @classmethod
    def _from_array(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t._tape = None
        t._tape_gen = 0
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def clear_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        """Copy of the value buffer (callers cannot mutate engine state)."""
        return self.data.copy()

    # arithmetic sugar; all semantics live in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def slice(self, axis, start, stop):
        return slice_axis(self, axis, start, stop)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """Ordered record of executed operations and their backward rules.

    Execution order is topological order by construction, so ``backward``
    simply walks the record list in reverse. A tape supports one backward
    pass; ``reset()`` clears it for reuse (training resets per step by
    opening a fresh tape).
    """

    def __init__(self):
        self._records = []  # (output tensor, backward rule) in execution order
        self._finalized = False
        self._generation = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        return False

    def _record(self, out: Tensor, rule):
        self._records.append((out, rule))
        out._tape = self
        out._tape_gen = self._generation

    def reset(self):
        """Discard all records and allow a new forward/backward cycle."""
        self._records.clear()
        self._finalized = False
        self._generation += 1

    def backward(self, loss: Tensor):
        if loss.data.ndim != 0:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss._tape_gen != self._generation:
            raise ValueError("loss belongs to a generation of this tape that was reset")
        if self._finalized:
            raise RuntimeError("tape already backpropagated; call reset() to reuse it")
        self._finalized = True
        loss.grad = np.ones((), dtype=np.float64)
        for out, rule in reversed(self._records):
            if out.grad is not None:
                rule(out.grad)


_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor):
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss._tape is None:
        raise ValueError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _start(out_data, *inputs):
    """Wrap a forward result; report whether a backward rule should record."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._from_array(out_data, track)
    return out, tape, track


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor._from_array(np.zeros(shape, dtype=np.float64), requires_grad)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)
    out, tape, track = _start(a.data + b.data, a, b)
    if track:
        def rule(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g)
        tape._record(out, rule)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)
    out, tape, track = _start(a.data - b.data, a, b)
    if track:
        def rule(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, -g)
        tape._record(out, rule)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("mul", a, b)
    out, tape, track = _start(a.data * b.data, a, b)
    if track:
        a_data, b_data = a.data, b.data
        def rule(g):
            if a.requires_grad:
                _accum(a, g * b_data)
            if b.requires_grad:
                _accum(b, g * a_data)
        tape._record(out, rule)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out, tape, track = _start(-a.data, a)
    if track:
        def rule(g):
            _accum(a, -g)
        tape._record(out, rule)
    return out


def absolute(a) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is taken as 0."""
    a = _as_tensor(a)
    out, tape, track = _start(np.abs(a.data), a)
    if track:
        sign = np.sign(a.data)
        def rule(g):
            _accum(a, g * sign)
        tape._record(out, rule)
    return out


def _sigmoid_forward(x: np.ndarray) -> np.ndarray:
    # split by sign so neither exp() can overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid_forward(a.data)
    out, tape, track = _start(y, a)
    if track:
        def rule(g):
            _accum(a, g * y * (1.0 - y))
        tape._record(out, rule)
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out, tape, track = _start(y, a)
    if track:
        def rule(g):
            _accum(a, g * (1.0 - y * y))
        tape._record(out, rule)
    return out


def scale(a, c) -> Tensor:
    """Multiply by a Python constant (the one permitted scalar broadcast)."""
    a = _as_tensor(a)
    c = float(c)
    out, tape, track = _start(a.data * c, a)
    if track:
        def rule(g):
            _accum(a, g * c)
        tape._record(out, rule)
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out, tape, track = _start(a.data @ b.data, a, b)
    if track:
        a_data, b_data = a.data, b.data
        def rule(g):
            if a.requires_grad:
                _accum(a, g @ b_data.T)
            if b.requires_grad:
                _accum(b, a_data.T @ g)
        tape._record(out, rule)
    return out


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out, tape, track = _start(np.sum(a.data), a)
    if track:
        shape = a.shape
        def rule(g):
            _accum(a, np.full(shape, float(g), dtype=np.float64))
        tape._record(out, rule)
    return out


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference as a scalar tensor.

    The target is an observation, never a function of parameters; it must not
    require grad.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_same_shape("l1_loss", pred, target)
    if pred.size == 0:
        raise ValueError("l1_loss: empty tensors")
    if target.requires_grad:
        raise ValueError("l1_loss: target must not require grad")
    diff = pred.data - target.data
    out, tape, track = _start(np.mean(np.abs(diff)), pred)
    if track:
        sub_grad = np.sign(diff) / diff.size
        def rule(g):
            _accum(pred, float(g) * sub_grad)
        tape._record(out, rule)
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: no tensors given")
    ndim = tensors[0].data.ndim
    if not 0 <= axis < ndim:
        raise ValueError(f"concat: axis {axis} out of range for {ndim}-d tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    out, tape, track = _start(out_data, *tensors)
    if track:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def rule(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accum(t, g[tuple(idx)])
        tape._record(out, rule)
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not 0 <= axis < a.data.ndim:
        raise ValueError(f"slice: axis {axis} out of range for shape {a.shape}")
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice: bounds [{start}, {stop}) invalid for axis of length {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out, tape, track = _start(a.data[idx], a)
    if track:
        shape = a.shape
        def rule(g):
            z = np.zeros(shape, dtype=np.float64)
            z[idx] = g
            _accum(a, z)
        tape._record(out, rule)
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    out, tape, track = _start(a.data.reshape(shape), a)
    if track:
        orig = a.shape
        def rule(g):
            _accum(a, g.reshape(orig))
        tape._record(out, rule)
    return out


def stack(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack: no tensors given")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ValueError(f"stack: shapes {first} and {t.shape} differ")
    if not 0 <= axis <= len(first):
        raise ValueError(f"stack: axis {axis} out of range")
    out_data = np.stack([t.data for t in tensors], axis=axis)
    out, tape, track = _start(out_data, *tensors)
    if track:
        def rule(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    _accum(t, np.take(g, i, axis=axis))
        tape._record(out, rule)
    return out


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ValueError(f"transpose: axes {axes} is not a permutation for shape {a.shape}")
    out, tape, track = _start(np.transpose(a.data, axes), a)
    if track:
        inverse = tuple(np.argsort(axes))
        def rule(g):
            _accum(a, np.transpose(g, inverse))
        tape._record(out, rule)
    return out


def repeat_rows(row, n: int) -> Tensor:
    """Repeat a 1xG row n times to an nxG matrix (explicit bias broadcast)."""
    row = _as_tensor(row)
    if row.data.ndim != 2 or row.shape[0] != 1:
        raise ValueError(f"repeat_rows: expects a 1xG row, got {row.shape}")
    if n < 1:
        raise ValueError(f"repeat_rows: n must be positive, got {n}")
    out, tape, track = _start(np.repeat(row.data, n, axis=0), row)
    if track:
        def rule(g):
            _accum(row, g.sum(axis=0, keepdims=True))
        tape._record(out, rule)
    return out
