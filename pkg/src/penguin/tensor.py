"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of primitives needed by small MLPs, the graph layers and
the PPO losses are provided. A :class:`Tape` records every primitive whose
inputs require gradients; :func:`backward` walks that record in reverse.
Outside an active tape the ops are plain numpy calls.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "parameter",
    "as_tensor",
    "backward",
    "finite_diff_gradient",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "square",
    "concat",
    "take",
    "take_rows",
    "clip",
    "minimum",
    "where",
]

_active_tape: "Tape | None" = None
_counter = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation.

    Parameters are leaves with ``requires_grad=True``. Every other tensor is
    produced by a primitive op; when a tape is active and any input requires
    gradients, the op is appended to the tape together with its
    vector-Jacobian product.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp", "_fwd", "_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._fwd = None
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic ---------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data, name: str | None = None) -> Tensor:
    """Create a leaf tensor that gradients are accumulated for."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable primitive ops in execution order.

    Use as a context manager; only one tape is active at a time.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._outer: Tape | None = None
        self.closed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        self._outer = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = self._outer
        self.closed = True

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def active(self) -> bool:
        return _active_tape is self

    def replay(self) -> bool:
        """Recompute every recorded node from its recorded inputs.

        Returns True when all recomputed values are bit-identical to the
        stored ones.
        """
        for node in self.nodes:
            recomputed = node._fwd(*(p.data for p in node._parents))
            if not np.array_equal(recomputed, node.data):
                return False
        return True


def current_tape() -> Tape | None:
    return _active_tape


def _record(out: np.ndarray, parents: Sequence[Tensor], vjp, fwd, opname: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite output from op '{opname}'")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.name = None
    t._id = next(_counter)
    tape = _active_tape
    if tape is not None and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
        t._fwd = fwd
        tape.nodes.append(t)
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
        t._fwd = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# elementwise binary -------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        np.add,
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        np.subtract,
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        np.multiply,
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
        np.divide,
        "div",
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    pick_a = ad <= bd
    return _record(
        np.minimum(ad, bd),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape)),
        np.minimum,
        "minimum",
    )


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
        lambda x, y: np.where(cond, x, y),
        "where",
    )


# matmul -------------------------------------------------------------------
def matmul(x, w) -> Tensor:
    """``x @ w`` where ``w`` is 2-D and ``x`` has any number of leading axes."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2

    def fwd(a, b):
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(lead + (b.shape[1],))

    return _record(fwd(xd, wd), (x, w), vjp, fwd, "matmul")


# elementwise unary ----------------------------------------------------------
def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),), np.tanh, "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),), _sigmoid, "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,), np.exp, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _record(y, (x,), lambda g: (g / xd,), np.log, "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x.data)
    return _record(y, (x,), lambda g: (0.5 * g / y,), np.sqrt, "sqrt")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,), np.square, "square")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _record(
        np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), lambda v: np.clip(v, lo, hi), "clip"
    )


# reductions and shape ops -------------------------------------------------------
def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(
        np.sum(x.data, axis=axis, keepdims=keepdims),
        (x,),
        vjp,
        lambda v: np.sum(v, axis=axis, keepdims=keepdims),
        "sum",
    )


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(
        x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), lambda v: v.reshape(shape), "reshape"
    )


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (np.ndarray, list)) for i in parts)

    def vjp(g):
        out = np.zeros(shape)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _record(x.data[index], (x,), vjp, lambda v: v[index], "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        vjp,
        lambda *vs: np.concatenate(vs, axis=axis),
        "concat",
    )


def take(x, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    ax = axis % x.ndim

    def vjp(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        return (out,)

    return _record(
        np.take(x.data, indices, axis=ax), (x,), vjp, lambda v: np.take(v, indices, axis=ax), "take"
    )


def take_rows(x, rows: np.ndarray) -> Tensor:
    """``x[b, rows[b]]`` for a batched ``(B, N, ...)`` tensor."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    batch = np.arange(x.shape[0])
    return getitem(x, (batch, rows))


# differentiation -------------------------------------------------------------
def backward(loss: Tensor, params: Iterable[Tensor] | None = None, tape: Tape | None = None) -> dict:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    ``tape`` defaults to the currently active tape. Parameters not reachable
    from ``loss`` receive exact zeros. Returns a dict keyed by parameter.
    """
    tape = tape if tape is not None else _active_tape
    if tape is None:
        raise RuntimeError("backward requires an active tape")
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg

    if params is None:
        return grads
    out = {}
    for p in params:
        g = grads.get(p._id)
        out[p] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return out


def finite_diff_gradient(
    f: Callable[[], float], params: Iterable[Tensor], step: float = 1e-5, entries: dict | None = None
) -> dict:
    """Central-difference gradient estimate of ``f`` over the entries of ``params``.

    ``f`` takes no arguments and reads the parameters' current values; the
    parameters are perturbed in place and restored afterwards. ``entries``
    optionally maps a parameter to the flat indices to difference; the
    skipped entries come back as NaN.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    out = {}
    for p in params:
        grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        todo = range(flat.size)
        if entries is not None and p in entries:
            gflat[:] = np.nan
            todo = np.asarray(entries[p], dtype=int)
        for k in todo:
            orig = flat[k]
            flat[k] = orig + step
            fp = float(f())
            flat[k] = orig - step
            fm = float(f())
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite evaluation while differencing {p.name}")
            gflat[k] = (fp - fm) / (2.0 * step)
        out[p] = grad
    return out
