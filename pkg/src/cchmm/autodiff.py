"""Reverse-mode differentiation over dense float64 tensors.

Define-by-run: while a Tape is active, every operation is recorded in
execution order; a single reverse sweep over that list yields exact
gradients. Accumulation follows reverse insertion order, so repeated runs
with identical inputs produce bitwise-identical gradients (single thread).

Broadcasting is restricted to leading axes: two operands conform when the
smaller shape equals a suffix of the larger one. Anything else is a
ShapeError, never a silent numpy broadcast.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import GradientError, NonFiniteError, ShapeError, SingularMatrixError

_ACTIVE_TAPE = None

PIVOT_TOL = 1e-10


class Tensor:
    """Dense float64 array plus an optional gradient buffer.

    Tensors are immutable after creation except for ``grad`` (written by
    ``backward``) and ``data`` during optimizer updates / finite-difference
    probes, both of which are single-threaded by contract.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size and not np.isfinite(arr).all():
            raise NonFiniteError(
                f"tensor '{name or '<unnamed>'}' contains non-finite values"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the recorded module functions
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; context manager activates recording."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise GradientError("a tape is already active; nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def reset(self) -> None:
        """Allow another backward pass. Caller manages stale grad buffers."""
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


def _out(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if arr.size and not np.isfinite(arr).all():
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NonFiniteError(f"{op}: non-finite output from input shapes [{shapes}]")
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = any(i.requires_grad for i in inputs)
    t.grad = None
    t.name = None
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.nodes.append(_Node(op, inputs, t, backward_fn))
    return t


def _shape_err(op: str, *tensors: Tensor) -> ShapeError:
    shapes = ", ".join(str(t.shape) for t in tensors)
    return ShapeError(f"{op}: shapes do not conform: [{shapes}]")


def _suffix_ok(small: tuple[int, ...], big: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and (len(small) == 0 or big[-len(small):] == small)


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if _suffix_ok(sa, sb) or _suffix_ok(sb, sa):
        return
    raise _shape_err(op, a, b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # leading-axis broadcasting only, so reducing leading axes restores shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("add", a, b)

    def bw(g, need):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(g, b.shape) if need[1] else None,
        )

    return _out("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("sub", a, b)

    def bw(g, need):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            -_unbroadcast(g, b.shape) if need[1] else None,
        )

    return _out("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("mul", a, b)

    def bw(g, need):
        return (
            _unbroadcast(g * b.data, a.shape) if need[0] else None,
            _unbroadcast(g * a.data, b.shape) if need[1] else None,
        )

    return _out("mul", a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g, need):
        return (-g,)

    return _out("neg", -a.data, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g, need):
        return (g * (2.0 * a.data),)

    return _out("square", a.data * a.data, (a,), bw)


def squared_error(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (a - b)**2."""
    return square(sub(a, b))


# ---------------------------------------------------------------------------
# matmul and friends


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise _shape_err("matmul", a, b)
    if a.shape[-1] != b.shape[-2]:
        raise _shape_err("matmul", a, b)
    la, lb = a.shape[:-2], b.shape[:-2]
    if la != lb and la != () and lb != ():
        raise _shape_err("matmul", a, b)

    def bw(g, need):
        ga = gb = None
        if need[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if need[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (ga, gb)

    return _out("matmul", np.matmul(a.data, b.data), (a, b), bw)


def matrix_power(a: Tensor, n: int) -> Tensor:
    """a @ a @ ... (n factors, n-1 sequential multiplications)."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise _shape_err("matrix_power", a)
    if n < 1:
        raise ShapeError(f"matrix_power: exponent must be >= 1, got {n}")
    out = a
    for _ in range(n - 1):
        out = matmul(out, a)
    return out


def trace(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise _shape_err("trace", a)
    k = a.shape[0]

    def bw(g, need):
        return (float(g) * np.eye(k),)

    return _out("trace", np.asarray(np.trace(a.data)), (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        arr = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e

    def bw(g, need):
        return (g.reshape(a.shape),)

    return _out("reshape", arr, (a,), bw)


def moveaxis(a: Tensor, src: int, dst: int) -> Tensor:
    def bw(g, need):
        return (np.moveaxis(g, dst, src),)

    return _out("moveaxis", np.moveaxis(a.data, src, dst), (a,), bw)


def swap_last_axes(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise _shape_err("swap_last_axes", a)

    def bw(g, need):
        return (np.swapaxes(g, -1, -2),)

    return _out("swap_last_axes", np.swapaxes(a.data, -1, -2), (a,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    ax = axis if axis >= 0 else axis + nd
    for t in tensors[1:]:
        if t.ndim != nd:
            raise _shape_err("concat", *tensors)
        for d in range(nd):
            if d != ax and t.shape[d] != tensors[0].shape[d]:
                raise _shape_err("concat", *tensors)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g, need):
        pieces = np.split(g, offsets, axis=ax)
        return tuple(p if need[i] else None for i, p in enumerate(pieces))

    return _out("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack along a new axis; composed from reshape + concat."""
    tensors = list(tensors)
    nd = tensors[0].ndim + 1
    ax = axis if axis >= 0 else axis + nd
    expanded = []
    for t in tensors:
        shape = t.shape[:ax] + (1,) + t.shape[ax:]
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=ax)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis if axis >= 0 else axis + a.ndim
    if not (0 <= ax < a.ndim) or not (0 <= start < stop <= a.shape[ax]):
        raise ShapeError(
            f"slice_axis: range [{start}:{stop}] on axis {axis} of shape {a.shape}"
        )
    idx = tuple(slice(None) if d != ax else slice(start, stop) for d in range(a.ndim))

    def bw(g, need):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _out("slice_axis", a.data[idx].copy(), (a,), bw)


def take_slot(a: Tensor, axis: int, index: int) -> Tensor:
    """Select one index along an axis and drop that axis."""
    ax = axis if axis >= 0 else axis + a.ndim
    sliced = slice_axis(a, ax, index, index + 1)
    return reshape(sliced, a.shape[:ax] + a.shape[ax + 1:])


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)

    def bw(g, need):
        return (g * y * (1.0 - y),)

    return _out("sigmoid", y, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g, need):
        return (g * (1.0 - y * y),)

    return _out("tanh", y, (a,), bw)


def relu(a: Tensor) -> Tensor:
    def bw(g, need):
        return (g * (a.data > 0.0),)

    return _out("relu", np.maximum(a.data, 0.0), (a,), bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)

    def bw(g, need):
        return (g * y,)

    return _out("exp", y, (a,), bw)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)

    def bw(g, need):
        return (g / a.data,)

    return _out("log", y, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, need):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _out("softmax", y, (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g, need):
        return (g * mask,)

    return _out("clamp", np.clip(a.data, lo, hi), (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def _sum_backward_shape(a_shape, axis, keepdims, g):
    if axis is None:
        return np.broadcast_to(g, a_shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax if ax >= 0 else ax + len(a_shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, a_shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g, need):
        return (_sum_backward_shape(a.shape, axis, keepdims, g),)

    return _out("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def bw(g, need):
        return (_sum_backward_shape(a.shape, axis, keepdims, g) / count,)

    return _out("mean", np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw)


# ---------------------------------------------------------------------------
# dense solve


def _plu_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b by Gaussian elimination with partial pivoting.

    Skips zero multipliers so rows untouched by an input stay bitwise
    untouched in the output (relied on for causal-locality guarantees).
    """
    a = a.copy()
    b = b.copy()
    k = a.shape[0]
    for col in range(k):
        p = col + int(np.argmax(np.abs(a[col:, col])))
        pivot = abs(a[p, col])
        if pivot < PIVOT_TOL:
            raise SingularMatrixError(
                f"solve_small: pivot {pivot:.3e} below {PIVOT_TOL:.0e} at column {col}",
                pivot=pivot,
            )
        if p != col:
            a[[col, p]] = a[[p, col]]
            b[[col, p]] = b[[p, col]]
        for row in range(col + 1, k):
            m = a[row, col] / a[col, col]
            if m != 0.0:
                a[row, col:] -= m * a[col, col:]
                b[row] -= m * b[col]
    for col in range(k - 1, -1, -1):
        if col + 1 < k:
            tail = a[col, col + 1:] @ b[col + 1:]
            if np.any(tail != 0.0):
                b[col] = b[col] - tail
        b[col] = b[col] / a[col, col]
    return b


def solve_small(a: Tensor, b: Tensor) -> Tensor:
    """Solve a @ x = b for small square a (k <= 16) without forming a^-1.

    Differentiable in both arguments via the adjoint rule:
    grad_b = a^-T @ grad_x and grad_a = -grad_b @ x^T.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise _shape_err("solve_small", a, b)
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise _shape_err("solve_small", a, b)
    if a.shape[0] > 16:
        raise ShapeError(f"solve_small: matrix side {a.shape[0]} exceeds 16")
    x = _plu_solve(a.data, b.data)

    def bw(g, need):
        gb = _plu_solve(a.data.T, g)
        ga = -(gb @ x.T) if need[0] else None
        return (ga, gb if need[1] else None)

    return _out("solve_small", x, (a, b), bw)


# ---------------------------------------------------------------------------
# backward sweep


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into .grad of every requires_grad leaf.

    Visits nodes exactly once, in reverse insertion order. Leaves on the
    tape that the root does not depend on receive explicit zero grads.
    """
    if tape._consumed:
        raise GradientError("tape already consumed; call reset() before reusing it")
    if root.data.size != 1:
        raise GradientError(f"backward root must be scalar, got shape {root.shape}")

    outputs = {id(node.output) for node in tape.nodes}
    on_tape = id(root) in outputs
    if not on_tape:
        is_tape_input = any(id(root) in map(id, node.inputs) for node in tape.nodes)
        if not (is_tape_input and root.requires_grad):
            raise GradientError("root is detached from this tape")

    tape._consumed = True
    for node in tape.nodes:
        node.output.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        need = tuple(t.requires_grad for t in node.inputs)
        if not any(need):
            continue
        grads = node.backward_fn(g, need)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=np.float64)
            else:
                t.grad += gi

    # zero-fill leaves that never received a contribution
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in outputs and t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# finite-difference checking


def check_gradients(f, leaves: dict[str, Tensor], eps: float = 1e-5,
                    max_entries_per_leaf: int | None = None, rng=None) -> dict:
    """Compare backward() gradients of scalar f() against central differences.

    ``f`` must rebuild its computation from ``leaves`` on every call and
    return a scalar Tensor. Relative error uses a unit floor,
    |a - n| / max(1, |a|, |n|), so near-zero gradients compare absolutely.
    Returns {"max_rel_err", "worst_leaf", "per_leaf"}.
    """
    if eps <= 0:
        raise GradientError("check_gradients: eps must be positive")
    for t in leaves.values():
        t.grad = None
    with Tape() as tape:
        root = f()
    backward(tape, root)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in leaves.items()
    }

    per_leaf: dict[str, float] = {}
    worst_leaf, worst = None, -1.0
    for name, t in leaves.items():
        flat = t.data.reshape(-1)
        if flat.size and not np.shares_memory(flat, t.data):
            raise GradientError(f"check_gradients: leaf '{name}' is not contiguous")
        ana = analytic[name].reshape(-1)
        n = flat.size
        if max_entries_per_leaf is not None and n > max_entries_per_leaf:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(n, size=max_entries_per_leaf, replace=False)
        else:
            idxs = range(n)
        leaf_worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ana[i] - numeric) / max(1.0, abs(ana[i]), abs(numeric))
            if err > leaf_worst:
                leaf_worst = err
        per_leaf[name] = leaf_worst
        if leaf_worst > worst:
            worst, worst_leaf = leaf_worst, name
    return {"max_rel_err": worst, "worst_leaf": worst_leaf, "per_leaf": per_leaf}
