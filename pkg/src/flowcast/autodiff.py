"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a contiguous, row-major numpy array of 64-bit
floats.  Whenever an operation consumes at least one input that is on a
gradient path, the output node records its input nodes and a
vector-Jacobian closure.  :func:`backward` linearizes the recorded graph
into reverse topological order (the tape), pushes the upstream gradient
through each closure exactly once, and accumulates the results onto the
``requires_grad`` leaves.

Gradients of intermediate nodes live only for the duration of a single
backward pass, so calling backward twice on the same graph adds the same
leaf gradients twice.  All kernels reduce in a fixed order, which keeps
forward and backward bit-reproducible from run to run.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Vjp = Callable[[np.ndarray], tuple]


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._vjp: Vjp | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        """The underlying array (shared, do not mutate on a grad path)."""
        return self.data

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's data, cut off from the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._prev = ()
        out._vjp = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # ---- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        raise TypeError("tensor division only supports scalar divisors")

    def __getitem__(self, idx):
        return tensor_slice(self, idx)

    def abs(self):
        return abs_(self)

    def square(self):
        return square(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _on_grad_path(t: Tensor) -> bool:
    return t.requires_grad or bool(t._prev)


def _node(data: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp | None) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if vjp is not None and any(_on_grad_path(t) for t in inputs):
        out._prev = tuple(inputs)
        out._vjp = vjp
    else:
        out._prev = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after all of its inputs.

    Iterative so that deeply unrolled graphs (recurrent nets) do not hit
    the interpreter recursion limit.  Each node appears exactly once.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf under ``loss``.

    The loss must be a scalar (size-1) tensor.  Repeated calls accumulate
    into the leaf gradients; intermediate gradients are pass-local.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            for child, cg in zip(node._prev, node._vjp(g)):
                if cg is None or not _on_grad_path(child):
                    continue
                held = flowing.get(id(child))
                flowing[id(child)] = cg if held is None else held + cg
        elif node.requires_grad:
            node.grad = np.array(g) if node.grad is None else node.grad + g


# ---- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def abs_(a) -> Tensor:
    # subgradient 0 at exact zero crossings
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def pow_scalar(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for exponent >= 1 (used on magnitudes)."""
    a = as_tensor(a)
    if exponent < 1.0:
        raise ValueError("pow_scalar requires exponent >= 1")
    if exponent == 1.0:
        return _node(np.array(a.data), (a,), lambda g: (g,))
    data = a.data**exponent

    def vjp(g):
        return (exponent * a.data ** (exponent - 1.0) * g,)

    return _node(data, (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(a, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(a)


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _node(y, (a,), vjp)


# ---- reductions and shape ops --------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.asarray(data), (a,), vjp)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _node(np.asarray(data), (a,), vjp)


def concat(tensors: Iterable, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    ndim = ts[0].ndim
    axis = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim:
            raise ShapeError("concat inputs must share rank")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != ts[0].shape[ax]:
                raise ShapeError(
                    f"concat mismatch off axis {axis}: {t.shape} vs {ts[0].shape}"
                )
    data = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(data, ts, vjp)


def tensor_slice(a, idx) -> Tensor:
    """Basic (int/slice/ellipsis) indexing; advanced indexing is rejected."""
    a = as_tensor(a)
    for part in idx if isinstance(idx, tuple) else (idx,):
        if not (part is Ellipsis or part is None or isinstance(part, (int, slice))):
            raise TypeError("only basic int/slice indexing is supported")
    data = np.ascontiguousarray(a.data[idx])

    def vjp(g):
        buf = np.zeros(a.shape)
        buf[idx] = g
        return (buf,)

    return _node(data, (a,), vjp)


def pad(a, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` is a per-axis (before, after) sequence."""
    a = as_tensor(a)
    widths = tuple((int(b), int(e)) for b, e in pad_width)
    if len(widths) != a.ndim:
        raise ShapeError("pad_width must give one (before, after) pair per axis")
    data = np.pad(a.data, widths)
    inner = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))

    def vjp(g):
        return (np.ascontiguousarray(g[inner]),)

    return _node(data, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = np.ascontiguousarray(a.data.reshape(shape))

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(data, (a,), vjp)


def moveaxis(a, source: int, destination: int) -> Tensor:
    a = as_tensor(a)
    data = np.ascontiguousarray(np.moveaxis(a.data, source, destination))

    def vjp(g):
        return (np.ascontiguousarray(np.moveaxis(g, destination, source)),)

    return _node(data, (a,), vjp)


def stack(tensors: Iterable, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis)


# ---- gradient verification ------------------------------------------------


def finite_diff_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a tensor of any shape; non-scalar outputs are
    contracted against a fixed random projection so one backward pass
    yields the full gradient.  The error is the largest absolute deviation
    normalized by the largest gradient magnitude seen on either side.
    """
    x0 = Tensor(np.array(x.data), requires_grad=True)
    y = f(x0)
    proj = np.random.default_rng(180_451).standard_normal(y.shape)
    scalar = tensor_sum(mul(y, Tensor(proj)))
    scalar.backward()
    analytic = x0.grad if x0.grad is not None else np.zeros(x0.shape)

    def probe(flat_index: int, delta: float) -> float:
        bumped = np.array(x.data)
        bumped.flat[flat_index] += delta
        return float((f(Tensor(bumped)).data * proj).sum())

    numeric = np.zeros(x.size)
    for i in range(x.size):
        numeric[i] = (probe(i, step) - probe(i, -step)) / (2.0 * step)
    numeric = numeric.reshape(x.shape)

    worst = np.abs(analytic - numeric).max()
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(worst / scale)
