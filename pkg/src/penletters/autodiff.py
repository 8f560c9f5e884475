"""Dense tensors with a reverse-mode differentiation tape.

Every operation on :class:`Tensor` objects that involves at least one input
with ``requires_grad=True`` records a :class:`Node` on its output.  Calling
:func:`backward` on a scalar loss linearises the recorded graph into a
:class:`Tape` (topological order) and replays the backward rules in reverse.

Computation runs in float32 by default.  :func:`precision` switches newly
created tensors to float64, which is what the gradient checks use.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .exceptions import NumericalError, ShapeError

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "backward",
    "binary_elementwise",
    "unary_elementwise",
    "matmul",
    "reduce",
    "finite_diff_check",
    "precision",
    "set_precision",
    "get_dtype",
    "no_grad",
    "corrupt_backward",
    "record",
]

ArrayLike = Union[np.ndarray, Sequence[float], float, int]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32, "grad_enabled": True}
# op name -> multiplier applied to that op's input gradients (test hook)
_backward_faults: dict[str, float] = {}


def get_dtype() -> type:
    return _state["dtype"]


def set_precision(name: str) -> None:
    """Set the default floating point precision, ``"f32"`` or ``"f64"``."""
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _state["dtype"] = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording of backward rules inside the block."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the gradients produced by one op's backward rule.

    Negative control for the gradient checker; never used in training.
    """
    _backward_faults[op] = factor
    try:
        yield
    finally:
        _backward_faults.pop(op, None)


class Tensor:
    """An n-dimensional array that can take part in differentiation.

    ``data`` is a numpy array in the active precision.  ``grad`` is ``None``
    until a backward pass reaches the tensor, then an array of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[type] = None,
        name: Optional[str] = None,
    ) -> None:
        arr = np.array(data, dtype=dtype or get_dtype(), copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal constructor: takes ownership of ``arr`` without copying
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return binary_elementwise("add", self, other)

    def __radd__(self, other):
        return binary_elementwise("add", other, self)

    def __sub__(self, other):
        return binary_elementwise("sub", self, other)

    def __rsub__(self, other):
        return binary_elementwise("sub", other, self)

    def __mul__(self, other):
        return binary_elementwise("mul", self, other)

    def __rmul__(self, other):
        return binary_elementwise("mul", other, self)

    def __truediv__(self, other):
        return binary_elementwise("div", self, other)

    def __rtruediv__(self, other):
        return binary_elementwise("div", other, self)

    def __neg__(self):
        return unary_elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def exp(self) -> "Tensor":
        return unary_elementwise("exp", self)

    def relu(self) -> "Tensor":
        return unary_elementwise("relu", self)

    def tanh(self) -> "Tensor":
        return unary_elementwise("tanh", self)

    def sigmoid(self) -> "Tensor":
        return unary_elementwise("sigmoid", self)

    def log1p_signed(self) -> "Tensor":
        return unary_elementwise("log1p_signed", self)

    def exp1m_signed(self) -> "Tensor":
        return unary_elementwise("exp1m_signed", self)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce("sum", self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce("mean", self, axis)

    def max(self, axis: Optional[int] = None) -> "Tensor":
        return reduce("max", self, axis)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    """One recorded operation: inputs, output and the rule mapping the output
    gradient to one gradient (or ``None``) per input."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out`` and attach a node when any input needs a gradient.

    This is the hook used by every differentiable operation, including the
    fused layer kernels defined outside this module.
    """
    result = Tensor._wrap(out)
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(op, tuple(inputs), result, backward_fn)
    return result


@dataclass
class Tape:
    """Recorded nodes in topological order (inputs before consumers)."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        if output.node is None:
            return cls(order)
        stack: list[tuple[Node, bool]] = [(output.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in node.inputs:
                if t.node is not None and id(t.node) not in seen:
                    stack.append((t.node, False))
        return cls(order)

    def replay(self, output: Tensor, seed: np.ndarray) -> None:
        """Propagate ``seed`` (d loss / d output) back through the nodes and
        accumulate into ``.grad`` of every tensor that requires one."""
        grads: dict[int, np.ndarray] = {id(output): seed}
        touched: dict[int, Tensor] = {id(output): output}
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            in_grads = node.backward_fn(g_out)
            factor = _backward_faults.get(node.op)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if factor is not None:
                    g = g * factor
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    touched[key] = t
        for key, t in touched.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` for every ``requires_grad`` tensor reaching ``loss``.

    Gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_output(loss).replay(loss, np.ones_like(loss.data))


# -- primitive operations ----------------------------------------------------


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1 and t.ndim <= 1


def _sum_to_scalar(g: np.ndarray, like: Tensor) -> np.ndarray:
    return np.asarray(g.sum(), dtype=like.dtype).reshape(like.shape)


def binary_elementwise(kind: str, a, b) -> Tensor:
    """``add``, ``sub``, ``mul`` or ``div`` of equal shapes or scalar-vs-tensor."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.shape == b.shape:
        a_bc = b_bc = False
    elif _is_scalar(b):
        a_bc, b_bc = False, True
    elif _is_scalar(a):
        a_bc, b_bc = True, False
    else:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are neither equal nor scalar-broadcast")
    x = a.data.reshape(()) if a_bc else a.data
    y = b.data.reshape(()) if b_bc else b.data

    def fit(g: np.ndarray, t: Tensor, bc: bool) -> np.ndarray:
        return _sum_to_scalar(g, t) if bc else g

    if kind == "add":
        out = x + y

        def bw(g):
            return fit(g, a, a_bc), fit(g, b, b_bc)

    elif kind == "sub":
        out = x - y

        def bw(g):
            return fit(g, a, a_bc), fit(-g, b, b_bc)

    elif kind == "mul":
        out = x * y

        def bw(g):
            return fit(g * y, a, a_bc), fit(g * x, b, b_bc)

    elif kind == "div":
        if np.any(b.data == 0):
            raise ZeroDivisionError("div: divisor contains a zero element")
        out = x / y

        def bw(g):
            return fit(g / y, a, a_bc), fit(-g * x / (y * y), b, b_bc)

    else:
        raise ValueError(f"unknown binary op {kind!r}")
    return record(kind, np.asarray(out), (a, b), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def unary_elementwise(kind: str, a: Tensor) -> Tensor:
    """Pointwise ``neg``, ``exp``, ``log1p_signed``, ``exp1m_signed``,
    ``relu``, ``tanh`` or ``sigmoid``.

    ``log1p_signed(x) = sign(x) * ln(|x| + 1)`` and ``exp1m_signed`` is its
    exact inverse ``sign(x) * (exp(|x|) - 1)``.
    """
    x = a.data
    if not np.isfinite(x).all():
        raise NumericalError(f"{kind}: input contains non-finite values")
    if kind == "neg":
        out = -x

        def bw(g):
            return (-g,)

    elif kind == "exp":
        out = np.exp(x)

        def bw(g):
            return (g * out,)

    elif kind == "log1p_signed":
        out = np.sign(x) * np.log1p(np.abs(x))

        def bw(g):
            return (g / (1.0 + np.abs(x)),)

    elif kind == "exp1m_signed":
        out = np.sign(x) * np.expm1(np.abs(x))

        def bw(g):
            return (g * (np.abs(out) + 1.0),)

    elif kind == "relu":
        out = np.maximum(x, 0)

        def bw(g):
            return (g * (x > 0),)

    elif kind == "tanh":
        out = np.tanh(x)

        def bw(g):
            return (g * (1.0 - out * out),)

    elif kind == "sigmoid":
        out = _sigmoid(x)

        def bw(g):
            return (g * out * (1.0 - out),)

    else:
        raise ValueError(f"unknown unary op {kind!r}")
    return record(kind, np.asarray(out, dtype=x.dtype), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[m, k]`` and ``[k, n]`` tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def bw(g):
        return g @ y.T, x.T @ g

    return record("matmul", x @ y, (a, b), bw)


def reduce(kind: str, a: Tensor, axis: Optional[int] = None) -> Tensor:
    """``sum``, ``mean`` or ``max`` over one axis or over everything.

    The gradient of ``max`` goes to the first maximal element only.
    """
    x = a.data
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"{kind}: axis {axis} out of range for rank {x.ndim}")
        axis = axis % x.ndim
    count = x.size if axis is None else x.shape[axis]

    def expand(g: np.ndarray) -> np.ndarray:
        return g.reshape(()) if axis is None else np.expand_dims(g, axis)

    if kind == "sum":
        out = x.sum(axis=axis)

        def bw(g):
            return (np.broadcast_to(expand(g), x.shape).copy(),)

    elif kind == "mean":
        out = x.mean(axis=axis)

        def bw(g):
            return (np.broadcast_to(expand(g) / count, x.shape).astype(x.dtype),)

    elif kind == "max":
        if axis is None:
            flat = int(np.argmax(x))
            out = x.reshape(-1)[flat]

            def bw(g):
                dx = np.zeros(x.size, dtype=x.dtype)
                dx[flat] = g.reshape(())
                return (dx.reshape(x.shape),)

        else:
            idx = np.expand_dims(np.argmax(x, axis=axis), axis)
            out = np.take_along_axis(x, idx, axis=axis).squeeze(axis)

            def bw(g):
                dx = np.zeros_like(x)
                np.put_along_axis(dx, idx, expand(g), axis=axis)
                return (dx,)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    out = np.asarray(out, dtype=x.dtype)
    if out.ndim == 0:
        out = out.reshape(1)
    return record(kind, out, (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = a.data

    def bw(g):
        return (g.reshape(x.shape),)

    return record("reshape", x.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = a.data
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inverse),)

    return record("transpose", np.ascontiguousarray(x.transpose(axes)), (a,), bw)


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; advanced indexing is not supported."""
    parts = index if isinstance(index, tuple) else (index,)
    if any(isinstance(p, (list, np.ndarray, Tensor)) for p in parts):
        raise ShapeError("only basic slicing is supported on tensors")
    x = a.data
    out = np.asarray(x[index])

    def bw(g):
        dx = np.zeros_like(x)
        dx[index] = g
        return (dx,)

    return record("take", np.ascontiguousarray(out), (a,), bw)


# -- verification --------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor | ArrayLike, eps: float = 1e-5
) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over elements.
    Run under ``precision("f64")`` for meaningful results.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=get_dtype())
    probe = Tensor(base, requires_grad=True)
    backward(f(probe))
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[i] += eps
        with no_grad():
            up = f(Tensor(shifted.reshape(base.shape))).item()
        shifted[i] -= 2 * eps
        with no_grad():
            down = f(Tensor(shifted.reshape(base.shape))).item()
        flat[i] = (up - down) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
