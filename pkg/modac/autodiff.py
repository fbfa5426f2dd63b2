# -*- coding: utf-8 -*-
"""
Reverse-mode automatic differentiation over dense float64 tensors.

Every differentiable operation records a node holding its inputs and a
vector-Jacobian product (VJP).  The VJPs are themselves written in terms of
:class:`Tensor` operations, so running the backward pass while recording
(``grad(..., create_graph=True)``) yields gradients that are ordinary graph
tensors.  Differentiating an expression of those gradients gives the
second-order terms needed to push a validation objective back through an
optimizer step.

Broadcasting is deliberately narrow: operands of a binary op must share a
shape, one of them must be a scalar, or the smaller shape must equal the
trailing axes of the larger one.  Anything else raises :class:`ShapeError`.
Explicit broadcasting is available through :func:`broadcast_to`.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from modac.utils import get_logger

logger = get_logger("modac.autodiff")

ArrayLike = Union[float, int, np.ndarray, Sequence[float]]
Shape = Tuple[int, ...]
Vjp = Callable[["Tensor", "Tensor", Tuple[bool, ...]], Tuple[Optional["Tensor"], ...]]


class AutodiffError(Exception):
    """Base class for differentiation errors."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, shapes: Sequence[Shape], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"{op}: non-finite value encountered{': ' + detail if detail else ''}")


class GradientError(AutodiffError, ValueError):
    """Invalid gradient request, e.g. differentiating a non-scalar."""


class _State(threading.local):
    def __init__(self) -> None:
        self.enabled = True
        self.tapes: List["Tape"] = []


_state = _State()
_seq = itertools.count()


class Node:
    """One recorded operation."""

    __slots__ = ("seq", "op", "inputs", "vjp")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], vjp: Vjp):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.vjp = vjp

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tape:
    """Append-only record of the nodes created while it is active.

    Tapes nest; nodes land on the innermost one.  ``replayable`` is set once a
    backward pass has recorded onto this tape, i.e. the tape now contains
    differentiable gradients.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.replayable = False

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _state.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Optional[Tape]:
    return _state.tapes[-1] if _state.tapes else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Disables recording on the current thread."""
    previous = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


@contextmanager
def enable_grad() -> Iterator[None]:
    previous = _state.enabled
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = previous


def is_recording() -> bool:
    return _state.enabled


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor", f"input {name or ''} contains NaN or inf".strip())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable and arr.base is None:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.node = None
        t.name = None
        return t

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # --- operators -----------------------------------------------------
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: ArrayLike) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def stop_gradient(t: Tensor) -> Tensor:
    """Same values, no gradient path."""
    return Tensor._wrap(as_tensor(t).data)


def _record(op: str, value: np.ndarray, inputs: Tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op, f"output of shape {value.shape}")
    out = Tensor._wrap(value)
    if _state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, vjp)
        tape = current_tape()
        if tape is not None:
            tape.nodes.append(out.node)
    return out


def _broadcast_shape(op: str, a: Shape, b: Shape) -> Shape:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise ShapeError(op, [a, b], "only scalar or trailing-axis broadcasting is supported")


# --- explicit broadcasting ----------------------------------------------------

def broadcast_to(a: Tensor, shape: Shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        value = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError("broadcast_to", [a.shape, shape]) from exc

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (sum_to(g, a.shape),)

    return _record("broadcast_to", value, (a,), vjp)


def sum_to(a: Tensor, shape: Shape) -> Tensor:
    """Sums ``a`` down to ``shape`` (inverse of :func:`broadcast_to`)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError("sum_to", [a.shape, shape])
    value = a.data.sum(axis=tuple(range(lead))) if lead else a.data
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and value.shape[i] != 1)
    if keep:
        value = value.sum(axis=keep, keepdims=True)
    if value.shape != shape:
        raise ShapeError("sum_to", [a.shape, shape])

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (broadcast_to(g, a.shape),)

    return _record("sum_to", np.array(value), (a,), vjp)


# --- elementwise ----------------------------------------------------------------

def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return _record("sub", a.data - b.data, (a, b), vjp)


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _record("mul", a.data * b.data, (a, b), vjp)


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    if np.any(b.data == 0):
        raise NonFiniteError("div", "division by zero")

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, out), b)), b.shape) if needs[1] else None
        return ga, gb

    return _record("div", a.data / b.data, (a, b), vjp)


def neg(a: Any) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (neg(g),)

    return _record("neg", -a.data, (a,), vjp)


def power(a: Any, exponent: ArrayLike) -> Tensor:
    """``a ** exponent`` for a constant (scalar or array) exponent."""
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise GradientError("power: exponent must be a constant, not a Tensor")
    p = np.asarray(exponent, dtype=np.float64)
    _broadcast_shape("power", a.shape, p.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.power(a.data, p)

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        if not np.any(p):
            return (Tensor._wrap(np.zeros(a.shape)),)
        lowered = np.where(p == 0, 0.0, p - 1.0)
        coef = Tensor._wrap(np.broadcast_to(p, _broadcast_shape("power", a.shape, p.shape)).copy())
        return (sum_to(mul(g, mul(coef, power(a, lowered))), a.shape),)

    return _record("power", value, (a,), vjp)


def exp(a: Any) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (mul(g, out),)

    with np.errstate(over="ignore"):
        return _record("exp", np.exp(a.data), (a,), vjp)


def log(a: Any) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (div(g, a),)

    with np.errstate(divide="ignore", invalid="ignore"):
        return _record("log", np.log(a.data), (a,), vjp)


def relu(a: Any) -> Tensor:
    a = as_tensor(a)
    mask = Tensor._wrap((a.data > 0).astype(np.float64))

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (mul(g, mask),)

    return _record("relu", a.data * mask.data, (a,), vjp)


def tanh(a: Any) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (mul(g, sub(1.0, mul(out, out))),)

    return _record("tanh", np.tanh(a.data), (a,), vjp)


def sigmoid(a: Any) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (mul(g, mul(out, sub(1.0, out))),)

    return _record("sigmoid", 0.5 * (1.0 + np.tanh(0.5 * a.data)), (a,), vjp)


def arctan(a: Any) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (div(g, add(1.0, mul(a, a))),)

    return _record("arctan", np.arctan(a.data), (a,), vjp)


# --- linear algebra and shape ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape], "expects (n, k) @ (k, m)")

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _record("matmul", a.data @ b.data, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", [a.shape], "expects a matrix")
    return permute(a, (1, 0))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("permute", [a.shape], f"bad axes {axes}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (permute(g, inverse),)

    return _record("permute", np.transpose(a.data, axes), (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError("reshape", [a.shape, tuple(shape)]) from exc

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (reshape(g, a.shape),)

    return _record("reshape", value, (a,), vjp)


def getitem(a: Tensor, index: Any) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.data[index]
    except IndexError as exc:
        raise ShapeError("getitem", [a.shape], str(exc)) from exc

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (scatter_add(g, index, a.shape),)

    return _record("getitem", np.array(value), (a,), vjp)


def scatter_add(values: Tensor, index: Any, shape: Shape) -> Tensor:
    """Zeros of ``shape`` with ``values`` accumulated at ``index``."""
    values = as_tensor(values)
    out_value = np.zeros(tuple(shape))
    try:
        np.add.at(out_value, index, values.data)
    except (IndexError, ValueError) as exc:
        raise ShapeError("scatter_add", [values.shape, tuple(shape)], str(exc)) from exc

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (getitem(g, index),)

    return _record("scatter_add", out_value, (values,), vjp)


def gather_last(a: Tensor, indices: np.ndarray) -> Tensor:
    """``out[..., ] = a[..., indices[...]]`` along the last axis."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError("gather_last", [a.shape, idx.shape])
    lead = np.indices(idx.shape, sparse=True) if idx.ndim else ()
    return getitem(a, tuple(lead) + (idx,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat", [], "nothing to concatenate")
    ndim = tensors[0].ndim
    ax = axis % ndim if ndim else 0
    for t in tensors:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError("concat", [x.shape for x in tensors])
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        grads = []
        for i, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            sl = [slice(None)] * ndim
            sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(getitem(g, tuple(sl)))
        return tuple(grads)

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def pad(a: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` gives (before, after) per axis."""
    a = as_tensor(a)
    if len(widths) != a.ndim:
        raise ShapeError("pad", [a.shape], f"{len(widths)} pad widths")
    shape = tuple(n + lo + hi for n, (lo, hi) in zip(a.shape, widths))
    index = tuple(slice(lo, lo + n) for n, (lo, _) in zip(a.shape, widths))
    return scatter_add(a, index, shape)


# --- reductions ------------------------------------------------------------

def _normalize_axes(axis: int | Tuple[int, ...] | None, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _record("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", [a.shape], "mean over an empty axis")
    return mul(tsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    value = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        inner = broadcast_to(tsum(mul(g, out), axis=-1, keepdims=True), a.shape)
        return (mul(out, sub(g, inner)),)

    return _record("softmax", value, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    value = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(g: Tensor, out: Tensor, needs: Tuple[bool, ...]):
        total = broadcast_to(tsum(g, axis=-1, keepdims=True), a.shape)
        return (sub(g, mul(exp(out), total)),)

    return _record("log_softmax", value, (a,), vjp)


# --- convolution -----------------------------------------------------------

def _patch_index(channels: int, height: int, width: int, kernel: Tuple[int, int]) -> Tuple[np.ndarray, ...]:
    kh, kw = kernel
    out_h, out_w = height - kh + 1, width - kw + 1
    c, i, j = np.meshgrid(np.arange(channels), np.arange(kh), np.arange(kw), indexing="ij")
    y, x = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    rows = y.reshape(-1, 1) + i.reshape(1, -1)
    cols = x.reshape(-1, 1) + j.reshape(1, -1)
    chans = np.broadcast_to(c.reshape(1, -1), rows.shape)
    return chans, rows, cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "valid") -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) on NCHW input.

    ``weight`` is (filters, channels, kh, kw).  ``padding`` is ``"valid"`` or
    ``"same"``; for even kernels "same" puts the extra row/column after.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", [x.shape, weight.shape], "expects NCHW input and FCkk weights")
    filters, channels, kh, kw = weight.shape
    if padding == "same":
        widths = [(0, 0), (0, 0), ((kh - 1) // 2, kh - 1 - (kh - 1) // 2), ((kw - 1) // 2, kw - 1 - (kw - 1) // 2)]
        x = pad(x, widths)
    elif padding != "valid":
        raise ValueError(f"conv2d: unsupported padding '{padding}'")
    n, _, height, width = x.shape
    out_h, out_w = height - kh + 1, width - kw + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError("conv2d", [x.shape, weight.shape], "kernel larger than input")

    chans, rows, cols = _patch_index(channels, height, width, (kh, kw))
    patches = getitem(x, (slice(None), chans, rows, cols))
    patches = reshape(patches, (n * out_h * out_w, channels * kh * kw))
    out = matmul(patches, transpose(reshape(weight, (filters, channels * kh * kw))))
    if bias is not None:
        out = add(out, bias)
    return permute(reshape(out, (n, out_h, out_w, filters)), (0, 3, 1, 2))


# --- differentiation -----------------------------------------------------------

class Gradients(list):
    """List of gradients aligned with the requested tensors.

    ``detached`` lists the positions whose tensor never reached the scalar;
    those entries are zeros.
    """

    def __init__(self, grads: Iterable[Tensor], detached: Sequence[int] = ()):
        super().__init__(grads)
        self.detached = list(detached)


def _collect(root: Tensor) -> List[Tuple[Node, Tensor]]:
    seen: Dict[int, Tuple[Node, Tensor]] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or id(node) in seen:
            continue
        seen[id(node)] = (node, t)
        stack.extend(node.inputs)
    return sorted(seen.values(), key=lambda item: item[0].seq)


def grad(scalar: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> Gradients:
    """Gradients of ``scalar`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the backward pass itself is recorded, so the
    returned gradients can be differentiated again.
    """
    if not isinstance(scalar, Tensor):
        raise GradientError("grad: expected a Tensor")
    if scalar.shape != ():
        raise GradientError(f"grad: expected a scalar, got shape {scalar.shape}")
    wrt = list(wrt)
    wrt_ids = {id(t) for t in wrt}

    ordered = _collect(scalar)
    relevant: Dict[int, bool] = {}
    for node, _ in ordered:
        relevant[id(node)] = any(
            id(inp) in wrt_ids or (inp.node is not None and relevant.get(id(inp.node), False))
            for inp in node.inputs
        )

    adjoints: Dict[int, Tensor] = {}
    captured: Dict[int, Tensor] = {}
    if id(scalar) in wrt_ids:
        captured[id(scalar)] = Tensor._wrap(np.ones(()))

    context = enable_grad() if create_graph else no_grad()
    with context:
        if create_graph and current_tape() is not None:
            current_tape().replayable = True
        if ordered and relevant[id(scalar.node)]:
            adjoints[id(scalar)] = Tensor._wrap(np.ones(()))
        for node, out in reversed(ordered):
            g = adjoints.pop(id(out), None)
            if g is None:
                continue
            if id(out) in wrt_ids:
                captured[id(out)] = g
            if not relevant[id(node)]:
                continue
            needs = tuple(
                id(inp) in wrt_ids or (inp.node is not None and relevant.get(id(inp.node), False))
                for inp in node.inputs
            )
            for inp, need, contribution in zip(node.inputs, needs, node.vjp(g, out, needs)):
                if not need or contribution is None:
                    continue
                key = id(inp)
                if inp.node is None and key in wrt_ids:
                    prev = captured.get(key)
                    captured[key] = contribution if prev is None else add(prev, contribution)
                else:
                    prev = adjoints.get(key)
                    adjoints[key] = contribution if prev is None else add(prev, contribution)

    results: List[Tensor] = []
    detached: List[int] = []
    for i, t in enumerate(wrt):
        g = captured.get(id(t))
        if g is None:
            detached.append(i)
            g = Tensor._wrap(np.zeros(t.shape))
        elif g.shape != t.shape:
            g = sum_to(g, t.shape)
        results.append(g)
    if detached:
        names = [wrt[i].name or f"#{i}" for i in detached]
        logger.warning("grad: %d tensor(s) did not reach the scalar, returning zeros: %s", len(detached), names)
    return Gradients(results, detached)
