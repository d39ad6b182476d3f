"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation records its parents and a vector-Jacobian
closure on the output tensor, so the tape is rebuilt on each forward pass.
``backward`` topologically sorts the graph reachable from a scalar loss and
sweeps it once in reverse, accumulating gradients into the leaf tensors
(tensors created directly with ``requires_grad=True``).

Conventions fixed here and relied on by callers and tests:

* relu uses subgradient 0 at the kink; abs uses sign with sign(0) = 0.
* Binary elementwise ops follow numpy broadcasting; gradients of broadcast
  operands are summed back to the operand's shape.
* Gradients accumulate across repeated backward calls; call ``zero_grad``
  (or rebuild the graph) between optimization steps.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericalError, ShapeError


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"

    # Operator sugar; scalars and arrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def relu(self):
        return relu(self)

    def abs(self):
        return abs_(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swap_last2(self):
        return swap_last2(self)

    def backward(self):
        backward(self)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
    else:
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting introduced or expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _scatter_add(shape: tuple[int, ...], idx: np.ndarray, axis: int, g: np.ndarray) -> np.ndarray:
    """zeros(shape) with g added at positions idx along axis (duplicates sum).

    Linearizes indices and uses bincount, which is much faster than
    np.add.at and just as deterministic.
    """
    grids = list(np.ogrid[tuple(slice(0, s) for s in g.shape)])
    grids[axis] = idx if idx.ndim == g.ndim else np.broadcast_to(idx, g.shape)
    linear = np.ravel_multi_index(tuple(grids), shape)
    flat = np.bincount(
        np.broadcast_to(linear, g.shape).ravel(),
        weights=g.ravel(),
        minlength=int(np.prod(shape)),
    )
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(out, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(out, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(out, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    if not np.all(np.isfinite(out)):
        raise NumericalError("div: non-finite result (zero or tiny denominator)")

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _from_op(out, (a, b), vjp, "div")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def vjp(g):
        return (g * mask,)

    return _from_op(out, (a,), vjp, "relu")


def abs_(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def vjp(g):
        return (g * sign,)

    return _from_op(out, (a,), vjp, "abs")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericalError("sqrt: negative input")

    def vjp(g):
        denom = np.maximum(out, 1e-300)
        return (g * 0.5 / denom,)

    return _from_op(out, (a,), vjp, "sqrt")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _from_op(out, (a, b), vjp, "matmul")


def left_multiply(matrix: np.ndarray, z: Tensor) -> Tensor:
    """Constant (n, n) matrix times each (n, k) slice of z, shape (b, n, k).

    Folds the batch into the columns so BLAS sees one large product; the
    matrix is a plain array and stays off the tape.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"left_multiply expects (b, n, k), got {z.shape}")
    b, n, k = z.shape
    if matrix.shape != (n, n):
        raise ShapeError(f"matrix {matrix.shape} does not match {n} rows of {z.shape}")

    def fold(arr, mat):
        cols = np.moveaxis(arr, 1, 0).reshape(n, b * k)
        return np.moveaxis((mat @ cols).reshape(n, b, k), 0, 1)

    out = fold(z.data, matrix)

    def vjp(g):
        return (fold(g, matrix.T),)

    return _from_op(out, (z,), vjp, "left_multiply")


def window_shift(z: Tensor, offset: int, window: int) -> Tensor:
    """Shift each window's time slices by ``offset``, replicating edge slices.

    z stacks windows along axis 0 (b * window slices); slice i of a window
    becomes slice clip(i + offset) of the output, so the backward pass is a
    handful of slice additions rather than a generic scatter.
    """
    if z.ndim != 3:
        raise ShapeError(f"window_shift expects (time, nodes, dim), got {z.shape}")
    n_slices = z.shape[0]
    if n_slices % window != 0:
        raise ShapeError(f"{n_slices} slices not divisible by window {window}")
    n_windows = n_slices // window
    idx = np.clip(np.arange(window) + offset, 0, window - 1)
    folded_shape = (n_windows, window, *z.shape[1:])
    out = z.data.reshape(folded_shape)[:, idx].reshape(z.shape)

    def vjp(g):
        g4 = g.reshape(folded_shape)
        buf = np.zeros(folded_shape)
        for i, j in enumerate(idx):
            buf[:, j] += g4[:, i]
        return (buf.reshape(z.shape),)

    return _from_op(out, (z,), vjp, "window_shift")


def swap_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"swap_last2: needs at least 2-D, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _from_op(out, (a,), vjp, "swap_last2")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    in_shape = a.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return _from_op(out, (a,), vjp, "reshape")


# ---------------------------------------------------------------------------
# shape surgery


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty part list")
    first = parts[0].shape
    ax = axis % len(first) if first else 0
    for p in parts[1:]:
        if len(p.shape) != len(first):
            raise ShapeError(f"concat: rank mismatch {first} vs {p.shape}")
        for d, (m, n) in enumerate(zip(first, p.shape)):
            if d != ax and m != n:
                raise ShapeError(f"concat: dimension {d} differs, {first} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _from_op(out, tuple(parts), vjp, "concat")


def concat_last(parts) -> Tensor:
    return concat(parts, axis=-1)


def split_last(a: Tensor, sizes) -> list[Tensor]:
    """Inverse of concat_last; mainly here so the round-trip is testable."""
    if sum(sizes) != a.shape[-1]:
        raise ShapeError(f"split_last: sizes {sizes} do not sum to last dim of {a.shape}")
    offsets = np.cumsum(sizes)[:-1]
    chunks = np.split(a.data, offsets, axis=-1)
    outs = []
    start = 0
    for chunk in chunks:
        width = chunk.shape[-1]
        lo = start

        def vjp(g, lo=lo, width=width):
            buf = np.zeros(a.shape)
            buf[..., lo : lo + width] = g
            return (buf,)

        outs.append(_from_op(chunk, (a,), vjp, "split_last"))
        start += width
    return outs


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select slices along ``axis`` by integer index (rows for axis 0).

    Backward scatter-adds into the source, so duplicate indices accumulate.
    """
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"take: index {bad} out of range for axis {axis} with size {n}")
    out = np.take(a.data, idx, axis=axis)
    unique = idx.size == np.unique(idx).size

    def vjp(g):
        if unique:  # plain fancy assignment; nothing accumulates
            buf = np.zeros(a.shape)
            np.moveaxis(buf, axis, 0)[idx] = np.moveaxis(g, axis, 0)
            return (buf,)
        expanded = idx.reshape([-1 if d == axis else 1 for d in range(g.ndim)])
        return (_scatter_add(a.shape, expanded, axis, g),)

    return _from_op(out, (a,), vjp, "take")


def gather_rows(a: Tensor, indices) -> Tensor:
    return take(a, indices, axis=0)


def take_along(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """np.take_along_axis with scatter-add backward.

    ``indices`` must already match ``a``'s rank (use expanded index arrays).
    """
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != a.ndim:
        raise ShapeError(f"take_along: index rank {idx.ndim} != tensor rank {a.ndim}")
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)].ravel()[0]
        raise IndexError(f"take_along: index {bad} out of range for axis {axis} with size {n}")
    out = np.take_along_axis(a.data, idx, axis=axis)

    def vjp(g):
        return (_scatter_add(a.shape, idx, axis, g),)

    return _from_op(out, (a,), vjp, "take_along")


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _from_op(out, (a,), vjp, "sum")


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in ax]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# backward pass


def trace_tape(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root``, parents before children (iterative DFS)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be scalar. Each tape node is visited exactly once; repeated
    calls keep accumulating into existing leaf gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = trace_tape(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be finite at x +/- h.
    Relative error uses max(1e-8, |numeric|) in the denominator.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ContractError("grad_check: f must be scalar-valued")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - h
        lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericalError(f"grad_check: f non-finite at perturbation of coordinate {i}")
        numeric[i] = (hi - lo) / (2.0 * h)

    numeric = numeric.reshape(x.shape)
    denom = np.maximum(1e-8, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
