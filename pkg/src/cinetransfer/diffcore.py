"""Reverse-mode gradient tape over dense float64 arrays.

Every differentiable quantity in the package is a :class:`Tensor`. Tensors
produced from at least one taped input are appended to that input's
:class:`Tape`; everything else is a plain constant that never records.

Primitives are registered by name with :func:`primitive`. A primitive is a
function ``fn(*arrays, **static) -> (value, vjp)`` where ``vjp(g)`` returns one
adjoint (or ``None``) per array input. Heavy operations elsewhere in the
package (volume rendering, Sinkhorn) are registered the same way, so the tape
stays coarse and backward stays cheap.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_REGISTRY: dict[str, Callable] = {}


class ShapeError(ValueError):
    """Inputs of a primitive have incompatible shapes."""

    def __init__(self, op: str, shapes: Sequence[tuple]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {list(self.shapes)}")


class GradientError(RuntimeError):
    """Backward pass could not produce a valid gradient."""

    def __init__(self, message: str, node: int | None = None, op: str | None = None):
        self.node = node
        self.op = op
        super().__init__(message)


def primitive(name: str):
    """Register ``fn`` as the forward/adjoint rule for ``name``."""

    def deco(fn):
        _REGISTRY[name] = fn
        fn.op_name = name
        return fn

    return deco


@dataclass
class Node:
    op: str
    parents: tuple  # tape indices, None for constant inputs
    inputs: tuple  # input arrays, kept for replay
    static: dict
    value: np.ndarray
    vjp: Callable | None


@dataclass
class MaskStats:
    """Number of pixels that still carried a nonzero adjoint after masking."""

    per_node: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(self.per_node.values()))


class Tape:
    """Linear record of primitive applications.

    Nodes are appended in evaluation order, which is a topological order, so
    backward is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._masks: dict[int, tuple[np.ndarray, int]] = {}
        self.mask_stats = MaskStats()

    def __len__(self):
        return len(self.nodes)

    def variable(self, value) -> Tensor:
        data = np.array(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), (), {}, data, None))
        return Tensor(data, self, len(self.nodes) - 1)

    def _append(self, op, parents, inputs, static, value, vjp) -> Tensor:
        self.nodes.append(Node(op, parents, inputs, static, value, vjp))
        return Tensor(value, self, len(self.nodes) - 1)

    def mask(self, tensor: Tensor, keep: np.ndarray, pixel_axes: int = 1):
        """Multiply the adjoint of ``tensor`` by ``keep`` before it propagates.

        ``keep`` must broadcast against the tensor. ``pixel_axes`` leading axes
        are treated as the pixel grid when counting surviving adjoints.
        """
        if not isinstance(tensor, Tensor) or tensor.tape is not self or tensor.node is None:
            raise KeyError("gradient mask target is not a node of this tape")
        keep = np.asarray(keep, dtype=np.float64)
        try:
            np.broadcast_shapes(keep.shape, tensor.shape)
        except ValueError:
            raise ShapeError("mask", [keep.shape, tensor.shape]) from None
        self._masks[tensor.node] = (keep, pixel_axes)

    def clear_masks(self):
        self._masks.clear()
        self.mask_stats = MaskStats()

    def replay(self) -> bool:
        """Re-run every recorded primitive and compare with the stored values."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.value)
                continue
            args = [values[p] if p is not None else x for p, x in zip(node.parents, node.inputs)]
            out, _ = _REGISTRY[node.op](*args, **node.static)
            if not np.array_equal(np.asarray(out), node.value, equal_nan=True):
                return False
            values.append(node.value)
        return True


class Tensor:
    """Dense float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 1000

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = f"node={self.node}" if self.tape is not None else "const"
        return f"Tensor({self.data!r}, {tag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, o):
        return record("add", [self, o])

    def __radd__(self, o):
        return record("add", [o, self])

    def __sub__(self, o):
        return record("sub", [self, o])

    def __rsub__(self, o):
        return record("sub", [o, self])

    def __mul__(self, o):
        return record("mul", [self, o])

    def __rmul__(self, o):
        return record("mul", [o, self])

    def __truediv__(self, o):
        return record("div", [self, o])

    def __rtruediv__(self, o):
        return record("div", [o, self])

    def __neg__(self):
        return record("neg", [self])

    def __pow__(self, p):
        return record("pow", [self], exponent=float(p))

    def __matmul__(self, o):
        return record("matmul", [self, o])

    def __rmatmul__(self, o):
        return record("matmul", [o, self])

    def __getitem__(self, idx):
        return record("getitem", [self], index=idx)

    @property
    def T(self):
        return record("transpose", [self])

    def sum(self, axis=None, keepdims=False):
        return record("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return record("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record("reshape", [self], shape=shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def record(op_kind: str, inputs, **static) -> Tensor:
    """Evaluate primitive ``op_kind`` on ``inputs`` and append it to the tape.

    The result is a constant when no input lives on a tape.
    """
    try:
        fn = _REGISTRY[op_kind]
    except KeyError:
        raise KeyError(f"unknown primitive {op_kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{op_kind}: inputs live on different tapes")
            tape = t.tape
    arrays = tuple(t.data for t in tensors)
    value, vjp = fn(*arrays, **static)
    value = np.asarray(value, dtype=np.float64)
    if tape is None:
        return Tensor(value)
    parents = tuple(t.node if t.tape is not None else None for t in tensors)
    return tape._append(op_kind, parents, arrays, static, value, vjp)


def grad(output: Tensor, params: Sequence[Tensor], check_finite: bool = True) -> list[np.ndarray]:
    """Adjoint of scalar ``output`` with respect to each tensor in ``params``.

    Parameters that do not influence ``output`` receive zeros.
    """
    if output.size != 1:
        raise GradientError(f"grad needs a scalar output, got shape {output.shape}")
    result = [np.zeros_like(p.data) for p in params]
    tape = output.tape
    if tape is None:
        return result
    wanted: dict[int, list[int]] = {}
    for k, p in enumerate(params):
        if p.tape is tape and p.node is not None:
            wanted.setdefault(p.node, []).append(k)
    tape.mask_stats = MaskStats()
    adj: dict[int, np.ndarray] = {output.node: np.ones_like(output.data)}
    for idx in range(output.node, -1, -1):
        g = adj.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if idx in tape._masks:
            keep, pixel_axes = tape._masks[idx]
            g = g * keep
            flat = np.abs(g).reshape(g.shape[:pixel_axes] + (-1,)).sum(axis=-1)
            tape.mask_stats.per_node[idx] = int(np.count_nonzero(flat))
        if check_finite and not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite adjoint at node {idx} ({node.op})", idx, node.op)
        if idx in wanted:
            for k in wanted[idx]:
                result[k] = result[k] + g
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            if parent in adj:
                adj[parent] = adj[parent] + pg
            else:
                adj[parent] = pg
    return result


def value_and_grad(f: Callable, params: Sequence[np.ndarray]):
    """Evaluate ``f`` on a fresh tape and return ``(value, grads)``."""
    tape = Tape()
    xs = [tape.variable(p) for p in params]
    out = f(*xs)
    return out.item(), grad(out, xs)


def check_gradient(f: Callable, params: Sequence[np.ndarray], h: float = 1e-4,
                   return_details: bool = False):
    """Largest relative deviation between the taped gradient and central differences.

    ``f`` takes one Tensor per entry of ``params`` and returns a scalar Tensor.
    Error per component is ``|analytic - fd| / max(|fd|, 1e-8)``.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    _, analytic = value_and_grad(f, params)

    def evaluate(ps):
        v = f(*[Tensor(p) for p in ps]).item()
        if not np.isfinite(v):
            raise GradientError("objective is not finite during finite differencing")
        return v

    fd = [np.zeros_like(p) for p in params]
    for k, p in enumerate(params):
        for i in np.ndindex(p.shape):
            hi = [q.copy() for q in params]
            lo = [q.copy() for q in params]
            hi[k][i] += h
            lo[k][i] -= h
            fd[k][i] = (evaluate(hi) - evaluate(lo)) / (2 * h)
    err = 0.0
    for a, n in zip(analytic, fd):
        if a.size:
            err = max(err, float(np.max(np.abs(a - n) / np.maximum(np.abs(n), 1e-8))))
    if return_details:
        return err, analytic, fd
    return err


# --- elementwise and structural primitives -------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(op, [np.shape(a), np.shape(b)]) from None


@primitive("add")
def _add(a, b):
    _bshape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@primitive("sub")
def _sub(a, b):
    _bshape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@primitive("mul")
def _mul(a, b):
    _bshape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@primitive("div")
def _div(a, b):
    _bshape("div", a, b)
    y = a / b
    return y, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * y / b, b.shape))


@primitive("neg")
def _neg(a):
    return -a, lambda g: (-g,)


@primitive("pow")
def _pow(a, exponent):
    y = a ** exponent
    return y, lambda g: (g * exponent * a ** (exponent - 1),)


@primitive("exp")
def _exp(a):
    y = np.exp(a)
    return y, lambda g: (g * y,)


@primitive("log")
def _log(a):
    return np.log(a), lambda g: (g / a,)


@primitive("sqrt")
def _sqrt(a):
    y = np.sqrt(a)

    def vjp(g):
        # subgradient 0 at the origin
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g / (2 * safe), 0.0),)

    return y, vjp


@primitive("sin")
def _sin(a):
    return np.sin(a), lambda g: (g * np.cos(a),)


@primitive("cos")
def _cos(a):
    return np.cos(a), lambda g: (-g * np.sin(a),)


@primitive("abs")
def _abs(a):
    return np.abs(a), lambda g: (g * np.sign(a),)


@primitive("square")
def _square(a):
    return a * a, lambda g: (2 * g * a,)


@primitive("clip")
def _clip(a, lo=None, hi=None):
    y = np.clip(a, lo, hi)
    inside = np.ones_like(a, dtype=bool)
    if lo is not None:
        inside &= a >= lo
    if hi is not None:
        inside &= a <= hi
    return y, lambda g: (g * inside,)


@primitive("where")
def _where(cond, a, b):
    c = cond.astype(bool)
    _bshape("where", a, b)
    return np.where(c, a, b), lambda g: (
        None,
        _unbroadcast(np.where(c, g, 0.0), a.shape),
        _unbroadcast(np.where(c, 0.0, g), b.shape),
    )


@primitive("matmul")
def _matmul(a, b):
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
        raise ShapeError("matmul", [a.shape, b.shape])
    y = a @ b

    def vjp(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b) if a.ndim > 1 else g * b
            gb = a.T @ g if a.ndim == 2 else (g * a if a.ndim == 1 else None)
            return ga, gb
        if a.ndim == 1:
            return b @ g, np.outer(a, g)
        return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g

    return y, vjp


@primitive("sum")
def _sum(a, axis=None, keepdims=False):
    y = np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return y, vjp


@primitive("mean")
def _mean(a, axis=None, keepdims=False):
    y = np.mean(a, axis=axis, keepdims=keepdims)
    n = a.size / max(y.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return y, vjp


@primitive("reshape")
def _reshape(a, shape):
    try:
        y = a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape, shape]) from None
    return y, lambda g: (g.reshape(a.shape),)


@primitive("transpose")
def _transpose(a, axes=None):
    y = np.transpose(a, axes)
    inv = None if axes is None else np.argsort(axes)
    return y, lambda g: (np.transpose(g, inv),)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


@primitive("getitem")
def _getitem(a, index):
    y = np.array(a[index], dtype=np.float64)
    basic = _is_basic(index)

    def vjp(g):
        out = np.zeros_like(a)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return y, vjp


@primitive("gather")
def _gather(a, index, axis=0):
    index = np.asarray(index, dtype=np.intp)
    y = np.take(a, index, axis=axis)

    def vjp(g):
        out = np.zeros_like(a)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return y, vjp


@primitive("index_update")
def _index_update(base, values, index):
    """Copy of ``base`` with rows ``index`` replaced by ``values``."""
    index = np.asarray(index, dtype=np.intp)
    y = base.copy()
    y[index] = values

    def vjp(g):
        gb = g.copy()
        gb[index] = 0.0
        return gb, g[index]

    return y, vjp


@primitive("concat")
def _concat(*arrays, axis=0):
    y = np.concatenate(arrays, axis=axis)
    splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return y, lambda g: tuple(np.split(g, splits, axis=axis))


@primitive("stack")
def _stack(*arrays, axis=0):
    y = np.stack(arrays, axis=axis)
    return y, lambda g: tuple(np.moveaxis(g, axis, 0))


@primitive("minmax_normalize")
def _minmax(a, guard=1e-12):
    flat = a.reshape(-1)
    lo_i = int(np.argmin(flat))  # ties -> lowest index
    hi_i = int(np.argmax(flat))
    lo, hi = flat[lo_i], flat[hi_i]
    den = hi - lo + guard
    y = (a - lo) / den

    def vjp(g):
        gf = g.reshape(-1)
        out = gf / den
        s = gf.sum()
        w = (gf * y.reshape(-1)).sum()
        out[lo_i] += -s / den + w / den
        out[hi_i] += -w / den
        return (out.reshape(a.shape),)

    return y, vjp


@primitive("norm2")
def _norm2(a):
    """Euclidean norm of the whole array, subgradient 0 at the origin."""
    y = float(np.sqrt(np.sum(a * a)))
    return np.asarray(y), lambda g: (g * a / y if y > 0 else np.zeros_like(a),)


# --- functional front-ends ---------------------------------------------------------------------


@primitive("norm2_rows")
def _norm2_rows(a):
    """Euclidean norm of each row of a 2-D array; subgradient 0 at the origin."""
    n = np.sqrt(np.sum(a * a, axis=1))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n[:, None] > 0, a / safe[:, None], 0.0) * g[:, None],)

    return n, vjp


def exp(x):
    return record("exp", [x])


def log(x):
    return record("log", [x])


def sqrt(x):
    return record("sqrt", [x])


def sin(x):
    return record("sin", [x])


def cos(x):
    return record("cos", [x])


def absolute(x):
    return record("abs", [x])


def square(x):
    return record("square", [x])


def clip(x, lo=None, hi=None):
    return record("clip", [x], lo=lo, hi=hi)


def where(cond, a, b):
    return record("where", [np.asarray(cond, dtype=np.float64), a, b])


def gather(x, index, axis=0):
    return record("gather", [x], index=np.asarray(index), axis=axis)


def index_update(base, index, values):
    return record("index_update", [base, values], index=np.asarray(index))


def concat(xs, axis=0):
    return record("concat", list(xs), axis=axis)


def stack(xs, axis=0):
    return record("stack", list(xs), axis=axis)


def transpose(x, axes=None):
    return record("transpose", [x], axes=None if axes is None else tuple(axes))


def minmax_normalize(x, guard=1e-12):
    return record("minmax_normalize", [x], guard=guard)


def norm2_rows(x):
    return record("norm2_rows", [x])


def norm2(x):
    return record("norm2", [x])
