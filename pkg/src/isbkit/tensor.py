"""Dense tensors with reverse-mode autodiff and a finite-difference oracle.

Every operation returns a new :class:`Tensor`; nothing is modified in place.
When any input is gradient-tracked the result records its parents and a
closure mapping the output gradient to per-parent gradients, so
:func:`backward` can walk the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class ContractError(RuntimeError):
    """Raised when a call violates a precondition that is not about shapes."""


class ConfigError(ValueError):
    """Raised for invalid module configurations."""


class Tensor:
    """Row-major N-d array of reals, optionally gradient-tracked."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _infer_dtype(data), copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; all strict-shape
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Build the output of an operation and, if needed, its graph node.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or None) per parent, each shaped like that parent.
    """
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data)
    arr.setflags(write=False)
    out.data = arr
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def tensor_new(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False,
               dtype=None) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    values = np.asarray(values, dtype=dtype or DEFAULT_DTYPE).reshape(-1)
    if math.prod(shape) != values.size:
        raise ShapeError(f"shape {shape} holds {math.prod(shape)} values, got {values.size}")
    return Tensor(values.reshape(shape), requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad, dtype)


def ones(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad, dtype)


# --------------------------------------------------------------------------
# operation census (executed multiply-adds, used by the complexity sweep)


@dataclass
class OpCensus:
    macs: int = 0
    elementwise: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op: str, macs: int = 0, elementwise: int = 0) -> None:
        self.macs += macs
        self.elementwise += elementwise
        self.by_op[op] = self.by_op.get(op, 0) + macs + elementwise


_CENSUS: list[OpCensus] = []


@contextlib.contextmanager
def census() -> Iterator[OpCensus]:
    """Tally multiply-adds actually executed by matmul/softmax inside the block."""
    c = OpCensus()
    _CENSUS.append(c)
    try:
        yield c
    finally:
        _CENSUS.remove(c)


def _tally(op: str, macs: int = 0, elementwise: int = 0) -> None:
    for c in _CENSUS:
        c.add(op, macs, elementwise)


# --------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_all(xs: Sequence[Tensor]) -> Tensor:
    out = xs[0]
    for t in xs[1:]:
        out = add(out, t)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = _wrap(x)
    c = x.dtype.type(c)
    return record(x.data * c, (x,), lambda g: (g * c,), "scale")


def elementwise(x: Tensor, y: Tensor | float, op: str) -> Tensor:
    """Dispatch form: ``op`` is one of ``add``, ``mul`` or ``scale``."""
    if op == "add":
        return add(x, y)
    if op == "mul":
        return mul(x, y)
    if op == "scale":
        return scale(x, y)
    raise ValueError(f"unknown elementwise op {op!r}")


def absolute(x: Tensor) -> Tensor:
    d = x.data
    return record(np.abs(d), (x,), lambda g: (g * np.sign(d),), "abs")


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return record(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return record(x.data.mean(), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


# --------------------------------------------------------------------------
# structural


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} values) into {shape}")
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, order: Sequence[int]) -> Tensor:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(x.ndim)):
        raise ShapeError(f"{order} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(order))
    out = np.ascontiguousarray(x.data.transpose(order))
    return record(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "permute")


def transpose_last(x: Tensor) -> Tensor:
    order = list(range(x.ndim))
    order[-1], order[-2] = order[-2], order[-1]
    return permute(x, order)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return record(np.ascontiguousarray(x.data[idx]), (x,), back, "slice")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, xs[0].shape)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def back(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(xs))
        )

    return record(np.concatenate([t.data for t in xs], axis=axis), xs, back, "concat")


def pad2d(x: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad the trailing two axes on the bottom/right."""
    if bottom == 0 and right == 0:
        return x
    h, w = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(0, bottom), (0, right)]
    return record(np.pad(x.data, widths), (x,), lambda g: (g[..., :h, :w].copy(),), "pad2d")


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` region of the trailing two axes."""
    H, W = x.shape[-2:]
    if height > H or width > W:
        raise ShapeError(f"crop {height}x{width} larger than {H}x{W}")
    if (height, width) == (H, W):
        return x
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., :height, :width] = g
        return (full,)

    return record(np.ascontiguousarray(x.data[..., :height, :width]), (x,), back, "crop2d")


# --------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the trailing two axes; leading axes must match."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: need equal-rank operands of rank >= 2, got {a.shape}, {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    m, n, p = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = math.prod(a.shape[:-2])
    _tally("matmul", macs=batch * m * n * p)

    def back(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return record(ad @ bd, (a, b), back, "matmul")


# --------------------------------------------------------------------------
# reverse pass


def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(leaf) to every tracked leaf reachable from ``loss``.

    Returns a map keyed by leaf tensor. Leaves listed in ``inputs`` but not
    reachable get a zero gradient. Each reached leaf's ``.grad`` is
    overwritten with its gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a single-element loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    result: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                result[node] = g
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    for t in inputs or ():
        if t not in result:
            z = np.zeros(t.shape, dtype=t.dtype)
            t.grad = z
            result[t] = z
    return result


# --------------------------------------------------------------------------
# finite differences


def fd_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step must be positive")
    base = x.data.astype(np.float64).copy()
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base, dtype=x.dtype)).item()
        flat[i] = orig - h
        fm = f(Tensor(base, dtype=x.dtype)).item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


@dataclass
class GradReport:
    max_rel_error: dict[str, float]
    max_abs_error: dict[str, float]
    tol: float
    abs_floor: float

    @property
    def per_input_pass(self) -> dict[str, bool]:
        return {
            k: self.max_rel_error[k] <= self.tol or self.max_abs_error[k] <= self.abs_floor
            for k in self.max_rel_error
        }

    @property
    def passed(self) -> bool:
        return all(self.per_input_pass.values())

    def __bool__(self) -> bool:
        return self.passed


REL_FLOOR = 1e-8


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor] | dict[str, Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
    abs_floor: float = 1e-8,
) -> GradReport:
    """Compare :func:`backward` against :func:`fd_gradient` for each input.

    ``f`` takes the inputs positionally (or by keyword when a dict is given)
    and returns a scalar tensor. Relative error per element is
    ``|a - b| / max(|a|, |b|, REL_FLOOR)``.
    """
    named = dict(inputs) if isinstance(inputs, dict) else {str(i): t for i, t in enumerate(inputs)}
    keyed = isinstance(inputs, dict)

    def call(values: dict[str, Tensor]) -> Tensor:
        return f(**values) if keyed else f(*values.values())

    tracked = {k: Tensor(t.data, requires_grad=True) for k, t in named.items()}
    loss = call(tracked)
    analytic = backward(loss, list(tracked.values()))

    rel, ab = {}, {}
    for k, t in tracked.items():
        def partial(v, k=k):
            vals = dict(named)
            vals[k] = v
            return call(vals)

        num = fd_gradient(partial, named[k], h)
        a = analytic[t]
        diff = np.abs(a - num)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), REL_FLOOR)
        rel[k] = float((diff / denom).max()) if diff.size else 0.0
        ab[k] = float(diff.max()) if diff.size else 0.0
    return GradReport(rel, ab, tol, abs_floor)
