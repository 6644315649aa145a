"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays. Operations executed while a :class:`Tape` is
active (and with at least one input requiring gradients) are appended to
that tape; :meth:`Tape.backward` replays the records in reverse. Each
thread has its own active tape, so worker contexts never share records.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the tape (non-scalar loss, double backward, ...)."""


class NumericError(ArithmeticError):
    """A non-finite value where a finite one is required."""


_local = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


class Record:
    __slots__ = ("fn", "inputs", "output", "ctx")

    def __init__(self, fn, inputs, output, ctx):
        self.fn = fn
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; records are appended in execution order,
    which is already a topological order of the computation.
    """

    def __init__(self) -> None:
        self.records: list[Record] = []
        self._consumed = False
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, rec: Record) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward; record a new one")
        self.records.append(rec)

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Populate ``.grad`` of every reachable leaf that requires gradients.

        Gradients accumulate into existing ``.grad`` arrays.
        """
        if self._consumed:
            raise TapeError("backward called twice on the same tape")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(r.output is loss for r in reversed(self.records)):
            raise TapeError("loss was not produced by an operation on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, seed, dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.fn.backward(rec.ctx, g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    leaves.setdefault(key, t)
        # whatever is left belongs to tensors not produced on this tape (leaves)
        for key, g in grads.items():
            t = leaves.get(key)
            if t is None:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=t.dtype, copy=True)
            else:
                t.grad += g


def backward(loss: Tensor) -> None:
    tape = active_tape()
    if tape is None:
        raise TapeError("no active tape")
    tape.backward(loss)


class Function:
    """Base for differentiable primitives: ``forward`` returns (array, ctx)."""

    @staticmethod
    def forward(*args, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, g: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        out_data, ctx = cls.forward(*(t.data for t in inputs), **kwargs)
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=needs)
        tape = active_tape()
        if needs and tape is not None:
            tape.record(Record(cls, inputs, out, ctx))
        return out


def _row_broadcast_ok(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape:
        return True
    return a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]


def _check_binary(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if not _row_broadcast_ok(a, b):
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def scatter_add_rows(n_rows: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``out[idx[e]] += values[e]`` in index order (deterministic)."""
    if values.dtype not in (np.float32, np.float64):
        # bincount works in float64; keep extended precision exact
        out = np.zeros((n_rows,) + values.shape[1:], dtype=values.dtype)
        np.add.at(out, idx, values)
        return out
    out = np.empty((n_rows,) + values.shape[1:], dtype=values.dtype)
    width = int(np.prod(values.shape[1:], dtype=np.int64))
    flat = values.reshape(len(idx), width)
    of = out.reshape(n_rows, width)
    for c in range(flat.shape[1]):
        of[:, c] = np.bincount(idx, weights=flat[:, c], minlength=n_rows)
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0)


class MatMul(Function):
    @staticmethod
    def forward(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return a @ b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        return g @ b.T, a.T @ g


class Linear(Function):
    """Fused ``x @ w + b``."""

    @staticmethod
    def forward(x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise DimensionError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
        out = x @ w
        out += b
        return out, (x, w)

    @staticmethod
    def backward(ctx, g):
        x, w = ctx
        return g @ w.T, x.T @ g, g.sum(axis=0)


class Add(Function):
    @staticmethod
    def forward(a, b):
        _check_binary(a, b, "add")
        return a + b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx
        return g, _reduce_to(g, sb)


class Sub(Function):
    @staticmethod
    def forward(a, b):
        _check_binary(a, b, "sub")
        return a - b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx
        return g, -_reduce_to(g, sb)


class Mul(Function):
    @staticmethod
    def forward(a, b):
        _check_binary(a, b, "mul")
        return a * b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        return g * b, _reduce_to(g * a, b.shape)


class Scale(Function):
    @staticmethod
    def forward(a, c: float):
        return a * a.dtype.type(c), c

    @staticmethod
    def backward(ctx, g):
        return (g * g.dtype.type(ctx),)


class ReLU(Function):
    @staticmethod
    def forward(a):
        # np.maximum propagates NaN, so corrupted inputs surface as a non-finite loss
        return np.maximum(a, a.dtype.type(0)), a > 0

    @staticmethod
    def backward(ctx, g):
        return (np.where(ctx, g, g.dtype.type(0)),)


class Identity(Function):
    @staticmethod
    def forward(a):
        return a.copy(), None

    @staticmethod
    def backward(ctx, g):
        return (g,)


class Sum(Function):
    @staticmethod
    def forward(a):
        return np.asarray(a.sum(), dtype=a.dtype), a.shape

    @staticmethod
    def backward(ctx, g):
        return (np.broadcast_to(g, ctx).copy(),)


class Gather(Function):
    """Row selection ``a[idx]``; backward scatters with accumulation."""

    @staticmethod
    def forward(a, idx: np.ndarray):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise IndexError(f"gather: index out of range for {a.shape[0]} rows")
        return a[idx], (a.shape, idx)

    @staticmethod
    def backward(ctx, g):
        shape, idx = ctx
        return (scatter_add_rows(shape[0], idx, g),)


class SegmentMean(Function):
    @staticmethod
    def forward(values, segment_ids: np.ndarray, num_segments: int):
        ids = np.asarray(segment_ids, dtype=np.int64)
        if values.ndim != 2 or ids.shape[0] != values.shape[0]:
            raise DimensionError(f"segment_mean: {values.shape} rows vs {ids.shape[0]} ids")
        if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
            raise IndexError(f"segment_mean: segment id out of range [0, {num_segments})")
        counts = np.bincount(ids, minlength=num_segments).astype(values.dtype)
        out = scatter_add_rows(num_segments, ids, values)
        safe = np.where(counts > 0, counts, 1)[:, None]
        out /= safe
        return out, (ids, safe)

    @staticmethod
    def backward(ctx, g):
        ids, safe = ctx
        return ((g / safe)[ids],)


class EdgeMatVec(Function):
    """Per-row matrix-vector product: out[e] = reshape(w[e], d_out×d_in) @ x[e]."""

    @staticmethod
    def forward(w, x):
        if w.ndim != 2 or x.ndim != 2 or w.shape[0] != x.shape[0]:
            raise DimensionError(f"edge_matvec: {w.shape} vs {x.shape}")
        d_in = x.shape[1]
        if d_in == 0 or w.shape[1] % d_in:
            raise DimensionError(f"edge_matvec: row width {w.shape[1]} not a multiple of {d_in}")
        w3 = w.reshape(w.shape[0], w.shape[1] // d_in, d_in)
        return np.einsum("eij,ej->ei", w3, x), (w3, x)

    @staticmethod
    def backward(ctx, g):
        w3, x = ctx
        gw = g[:, :, None] * x[:, None, :]
        gx = np.einsum("eij,ei->ej", w3, g)
        return gw.reshape(w3.shape[0], -1), gx


class HStack(Function):
    @staticmethod
    def forward(*arrays):
        rows = {a.shape[0] for a in arrays}
        if len(rows) != 1 or any(a.ndim != 2 for a in arrays):
            raise DimensionError(f"hstack: mismatched shapes {[a.shape for a in arrays]}")
        widths = [a.shape[1] for a in arrays]
        return np.concatenate(arrays, axis=1), widths

    @staticmethod
    def backward(ctx, g):
        cuts = np.cumsum(ctx)[:-1]
        return [np.ascontiguousarray(p) for p in np.split(g, cuts, axis=1)]


class OverwriteRows(Function):
    """Replace rows ``idx`` with constants; those rows pass no gradient back."""

    @staticmethod
    def forward(a, idx: np.ndarray, values: np.ndarray):
        idx = np.asarray(idx, dtype=np.int64)
        values = np.asarray(values, dtype=a.dtype).reshape(len(idx), *a.shape[1:])
        out = a.copy()
        out[idx] = values
        return out, idx

    @staticmethod
    def backward(ctx, g):
        g = g.copy()
        g[ctx] = 0
        return (g,)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return Linear.apply(x, w, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return Scale.apply(a, c=c)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def identity(a: Tensor) -> Tensor:
    return Identity.apply(a)


def tsum(a: Tensor) -> Tensor:
    return Sum.apply(a)


def gather(a: Tensor, idx) -> Tensor:
    return Gather.apply(a, idx=idx)


def segment_mean(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    return SegmentMean.apply(values, segment_ids=segment_ids, num_segments=num_segments)


def edge_matvec(w: Tensor, x: Tensor) -> Tensor:
    return EdgeMatVec.apply(w, x)


def hstack(tensors: Sequence[Tensor]) -> Tensor:
    return HStack.apply(*tensors)


def overwrite_rows(a: Tensor, idx, values) -> Tensor:
    return OverwriteRows.apply(a, idx=idx, values=values)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "identity": identity}


def elementwise(op: str, *args: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def _scalar(t: Tensor):
    return np.asarray(t.data).reshape(-1)[0]


def finite_diff_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    reference_dtype=None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must build its scalar output from ``params`` using tensor ops.
    Parameters are perturbed in place and restored afterwards. With
    ``reference_dtype`` (e.g. ``np.longdouble``) the perturbed evaluations
    run in that precision, which removes round-off from the numeric side;
    ``f`` must then derive its input dtypes from the parameters.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f(params)
    if not np.isfinite(out.data).all():
        raise NumericError("f returned a non-finite value")
    tape.backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    saved = [p.data for p in params]
    if reference_dtype is not None:
        for p in params:
            p.data = p.data.astype(reference_dtype)
    step = np.asarray(eps, dtype=params[0].data.dtype) if params else eps
    worst = 0.0
    try:
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = grad.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                fp = _scalar(f(params))
                flat[k] = orig - step
                fm = _scalar(f(params))
                flat[k] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("f returned a non-finite value under perturbation")
                numeric = float((fp - fm) / (2 * step))
                err = abs(float(aflat[k]) - numeric) / max(abs(numeric), 1e-8)
                worst = max(worst, err)
    finally:
        for p, data in zip(params, saved):
            p.data = data
    return worst
