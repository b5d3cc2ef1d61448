"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array of ``float32`` or ``float64``.
Operations are only recorded while a :class:`Tape` is active::

    with Tape() as tape:
        loss = (x @ w).tanh().sum()
    tape.backward(loss)

Outside a tape every operation is a plain numpy computation, which is what
evaluation loops rely on.  Broadcasting is deliberately limited to equal
shapes and 0-d scalars.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", float, int]

_local = threading.local()


def resolve_dtype(dtype) -> np.dtype:
    """Map ``"f32"``/``"f64"`` or a numpy dtype onto one of the two supported dtypes."""
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in DTYPES.values():
        raise ContractError(f"unsupported dtype {dt}; use f32 or f64")
    return dt


def dtype_name(dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in DTYPES.values() else np.float32
        self.data = np.asarray(data, dtype=resolve_dtype(dtype), order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis=None) -> "Tensor":
        return reduce(self, "sum", axis)

    def mean(self, axis=None) -> "Tensor":
        return reduce(self, "mean", axis)

    def tanh(self) -> "Tensor":
        return tanh_op(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self, retain_graph: bool = False) -> None:
        if self._tape is None:
            raise ContractError("tensor was not produced on a tape; nothing to differentiate")
        self._tape.backward(self, retain_graph=retain_graph)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple, output: Tensor, backward: BackwardFn):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Entering the tape as a context manager makes it the current tape for this
    thread.  Tapes nest; the innermost one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple, output: Tensor, backward: BackwardFn) -> None:
        output._tape = self
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor, retain_graph: bool = False) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

        Nodes are replayed in reverse recording order, so each node is
        visited after all of its consumers.  Intermediate gradients are
        dropped as soon as they have been propagated.
        """
        if loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        loss.grad = np.ones((), dtype=loss.dtype)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=inp.dtype)
                if gi.shape != inp.shape:
                    raise ContractError(
                        f"backward rule produced grad of shape {gi.shape} for input {inp.shape}")
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            if not retain_graph:
                node.output.grad = None
        if not retain_graph:
            self.nodes.clear()


def current_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def record_op(data: np.ndarray, inputs: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``backward`` receives the upstream gradient and returns one gradient (or
    ``None``) per input, in order.  Nothing is recorded unless a tape is
    active and some input requires grad.
    """
    inputs = tuple(inputs)
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ContractError(f"mixed dtypes in one graph: {sorted(str(d) for d in dtypes)}")
    dtype = inputs[0].dtype if inputs else None
    out = Tensor(data, dtype=dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward)
    return out


# -- elementwise -------------------------------------------------------------

def _broadcast_pair(a: Operand, b: Operand) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a, b = as_tensor(a, like), as_tensor(b, like)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def elementwise(a: Operand, b: Operand, kind: str) -> Tensor:
    """``add``, ``sub`` or ``mul`` of equal-shaped tensors or a tensor and a scalar."""
    a, b = _broadcast_pair(a, b)
    if kind == "add":
        data = a.data + b.data

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    elif kind == "sub":
        data = a.data - b.data

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    elif kind == "mul":
        data = a.data * b.data

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return record_op(data, (a, b), backward)


def add(a: Operand, b: Operand) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    return elementwise(a, b, "mul")


def tanh_op(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


# -- linear algebra and shape ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return record_op(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return record_op(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return record_op(data, (x,), lambda g: (g.reshape(x.shape),))


def _normalize_axis(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def reduce(x: Tensor, kind: str, axis=None) -> Tensor:
    """Sum or mean over ``axis`` (int, tuple, or ``None`` for all); reduced axes are dropped."""
    axes = _normalize_axis(axis, x.ndim)
    if kind == "sum":
        data, scale = x.data.sum(axis=axes), 1.0
    elif kind == "mean":
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        data, scale = x.data.mean(axis=axes), 1.0 / count
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept) * scale, x.shape),)

    return record_op(np.asarray(data, dtype=x.dtype), (x,), backward)
