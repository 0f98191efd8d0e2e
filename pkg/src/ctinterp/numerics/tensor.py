"""Dense tensors and the tape that records operations for reverse-mode gradients.

Only the fixed operation set used by the interpolator, the segmenter and their
losses is supported. Every op computes its forward value eagerly with numpy and,
when a :class:`Tape` is active and any input requires a gradient, records a
closure that maps the output gradient to input gradients.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf from finite inputs."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    """A float array with an optional gradient buffer.

    ``data`` keeps the dtype it was created with (float32 by default; float64 is
    used by :func:`~ctinterp.numerics.gradcheck.gradcheck`).
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; constants are plain numbers or arrays without gradient.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0)) if isinstance(other, Tensor) else shift(self, -np.asarray(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside it are recorded when at
    least one input requires a gradient::

        with Tape() as tape:
            loss = l1_loss(model(x), y)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> int:
        """Propagate gradients from ``loss`` to every recorded input.

        Leaf tensors that already hold a gradient buffer accumulate into it in
        place, so parameter gradients sum across calls until zeroed. Returns the
        number of operations visited.
        """
        loss.grad = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=loss.dtype)
        visited = 0
        for node in reversed(self.nodes):
            gout = node.out.grad
            if gout is None:
                continue
            visited += 1
            grads = node.backward(gout)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                g = g.astype(inp.dtype, copy=False)
                if inp.grad is None:
                    inp.grad = np.array(g, copy=True)
                else:
                    inp.grad += g
        return visited


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_tape():
    """Temporarily suspend recording (inference of frozen networks)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a forward result and record its backward rule if needed."""
    _check_finite(data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = current_tape()
    if needs and tape is not None:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    da, db = a.data, b.data

    def backward(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return emit(da * db, (a, b), backward, "mul")


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a constant (scalar or broadcastable array)."""
    c = np.asarray(c, dtype=x.dtype)
    return emit(x.data * c, (x,), lambda g: (_unbroadcast(g * c, x.shape),), "scale")


def shift(x: Tensor, c) -> Tensor:
    """Add a constant (scalar or broadcastable array)."""
    c = np.asarray(c, dtype=x.dtype)
    out = x.data + c
    shape = x.shape
    return emit(out, (x,), lambda g: (_unbroadcast(g, shape),), "shift")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat along axis {axis}: {exc}") from None
    return emit(data, tuple(tensors), backward, "concat")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice) indexing with gradient scattered back."""
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return emit(np.ascontiguousarray(x.data[index]), (x,), backward, "take")


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    orig = x.shape
    return emit(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(orig),), "reshape")


def gather2d(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Index the last two axes with integer row/col vectors (used for reflect padding)."""
    shape, dtype = x.shape, x.dtype
    rr, cc = np.ix_(rows, cols)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (Ellipsis, rr, cc), g)
        return (full,)

    return emit(x.data[..., rr, cc], (x,), backward, "gather2d")


def reflect_pad(x: Tensor, bottom: int, right: int) -> Tensor:
    """Reflect-pad the last two axes at the bottom/right edges."""
    if bottom == 0 and right == 0:
        return x
    h, w = x.shape[-2:]
    rows = np.pad(np.arange(h), (0, bottom), mode="reflect")
    cols = np.pad(np.arange(w), (0, right), mode="reflect")
    return gather2d(x, rows, cols)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    data = sum(float(w) * t.data for t, w in zip(terms, weights))
    data = np.asarray(data, dtype=terms[0].dtype)
    return emit(data, tuple(terms), lambda g: tuple(g * np.asarray(w, g.dtype) for w in weights), "weighted_sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return emit(np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean")
