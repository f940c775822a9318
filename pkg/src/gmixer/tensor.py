"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a read-only numpy array. Operations in this module
record themselves on the active :class:`ComputeTape` whenever at least one
input requires a gradient; :func:`backward` replays the tape in reverse and
accumulates adjoints into the :class:`~gmixer.params.Parameter` objects that
own leaf tensors.

The primitives are deliberately coarse (matmul, layer norm, masked
reductions, row gathers) rather than scalar-level.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import erf

__all__ = [
    "Tensor",
    "ComputeTape",
    "NonFiniteError",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "swap_last",
    "reshape",
    "concat",
    "gather_rows",
    "take",
    "broadcast_to",
    "tensor_sum",
    "tensor_mean",
    "tensor_abs",
    "gelu",
    "relu",
    "layer_norm",
    "masked_reduce",
    "mlp2",
    "corrupted_backward",
]

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """A tensor operation produced NaN or Inf."""


class Tensor:
    """Immutable dense array; ``param`` links leaf tensors to their Parameter."""

    __slots__ = ("data", "requires_grad", "param", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, param=None):
        arr = np.array(data, dtype=dtype, copy=None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class ComputeTape:
    """Ordered log of primitive operations executed while the tape is active."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "ComputeTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]


_TAPES: list[ComputeTape] = []
# op name -> factor applied to that op's input adjoints; a test hook only
_CORRUPTIONS: dict[str, float] = {}


@contextlib.contextmanager
def corrupted_backward(op: str, factor: float = 1.5):
    """Scale the adjoints produced by ``op`` while active (gradient-checker sensitivity tests)."""
    _CORRUPTIONS[op] = factor
    try:
        yield
    finally:
        _CORRUPTIONS.pop(op, None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    # python scalars and arrays adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].records.append(_Record(op, out, inputs, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: ComputeTape, loss: Tensor, wrt: Iterable[Tensor] = ()) -> list[np.ndarray]:
    """Accumulate d(loss)/d(param) into every reachable Parameter's ``grad``.

    Returns adjoints for the extra leaf tensors listed in ``wrt`` (zeros when
    unreachable). Each record on the tape is visited once, newest first.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}

    def push(t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in adj:
            adj[key] = adj[key] + g
        else:
            adj[key] = g
            leaves[key] = t

    leaves[id(loss)] = loss
    for rec in reversed(tape.records):
        g = adj.pop(id(rec.out), None)
        leaves.pop(id(rec.out), None)
        if g is None:
            continue
        grads = rec.backward(g)
        factor = _CORRUPTIONS.get(rec.op)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if factor is not None:
                gi = gi * factor
            push(t, gi)

    for key, t in leaves.items():
        if t.param is not None:
            t.param.grad += adj[key].reshape(t.param.grad.shape)
    return [adj.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules; ``b`` may be a shared 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    """Rank-2 transpose."""
    if x.ndim != 2:
        raise ValueError(f"transpose needs a rank-2 tensor, got rank {x.ndim}")
    return swap_last(x)


def swap_last(x: Tensor) -> Tensor:
    """Swap the two trailing axes (batched transpose)."""
    if x.ndim < 2:
        raise ValueError(f"swap_last needs rank >= 2, got rank {x.ndim}")
    return _emit(
        "transpose",
        np.swapaxes(x.data, -1, -2),
        (x,),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bwd(g):
        return np.split(g, bounds, axis=axis)

    return _emit("concat", out, tuple(xs), bwd)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for a 2-D table; the adjoint scatter-adds rows back."""
    index = np.asarray(index, dtype=np.intp)
    rows, width = table.shape

    def bwd(g):
        flat = g.reshape(-1, width)
        cols = np.arange(flat.shape[0])
        scatter = sparse.csr_matrix((np.ones(len(cols), dtype=g.dtype), (index.reshape(-1), cols)),
                                    shape=(rows, flat.shape[0]))
        return (np.asarray(scatter @ flat),)

    return _emit("gather", table.data[index], (table,), bwd)


def take(x: Tensor, key) -> Tensor:
    """Basic (slice) indexing; the adjoint is zero outside the selected window."""
    def bwd(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        out[key] = g
        return (out,)

    return _emit("take", x.data[key], (x,), bwd)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _emit(
        "broadcast",
        np.broadcast_to(x.data, shape),
        (x,),
        lambda g: (_unbroadcast(g, x.shape),),
    )


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", out, (x,), bwd)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def tensor_abs(x: Tensor) -> Tensor:
    # subgradient 0 at exact zero
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def masked_reduce(x: Tensor, mask: np.ndarray, axis: int, kind: str) -> Tensor:
    """Reduce ``x`` over ``axis`` using only positions where ``mask`` is true.

    ``kind`` is ``"max"``, ``"min"`` or ``"mean"``. ``mask`` has the shape of
    ``x`` without its trailing feature axis. Groups with no valid entry reduce
    to zero. For max/min the adjoint is routed to the first extremal entry.
    Results are exactly invariant to the order of entries along ``axis``.
    """
    axis = axis % x.ndim
    m = np.broadcast_to(np.asarray(mask, dtype=bool)[..., None], x.shape)
    empty = ~m.any(axis=axis)
    if kind == "mean":
        count = m.sum(axis=axis).astype(x.dtype)
        safe = np.where(count > 0, count, 1.0)
        # sorting first makes the float sum independent of neighbour order
        out = np.sort(np.where(m, x.data, 0.0), axis=axis).sum(axis=axis) / safe

        def bwd(g):
            return (np.where(m, np.expand_dims(g / safe, axis), 0.0),)

        return _emit("mean_agg", out, (x,), bwd)

    if kind not in ("max", "min"):
        raise ValueError(f"unknown reduction {kind!r}")
    fill = -np.inf if kind == "max" else np.inf
    filled = np.where(m, x.data, fill)
    arg = filled.argmax(axis=axis) if kind == "max" else filled.argmin(axis=axis)
    arg_e = np.expand_dims(arg, axis)
    out = np.take_along_axis(filled, arg_e, axis=axis).squeeze(axis)
    out = np.where(empty, 0.0, out)

    def bwd(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, arg_e, np.expand_dims(np.where(empty, 0.0, g), axis), axis=axis)
        return (gx,)

    return _emit(f"{kind}_agg", out, (x,), bwd)


# ---------------------------------------------------------------------------
# activations and normalisation


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    v = x.data
    cdf = 0.5 * (1.0 + erf(v * _SQRT_HALF))
    return _emit(
        "gelu",
        v * cdf,
        (x,),
        lambda g: (g * (cdf + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)),),
    )


def relu(x: Tensor) -> Tensor:
    v = x.data
    return _emit("relu", np.maximum(v, 0.0), (x,), lambda g: (g * (v > 0),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over the last axis (population variance), then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _emit("layer_norm", out, (x, gamma, beta), bwd)


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, activation: str = "gelu") -> Tensor:
    """Two-layer perceptron applied along the last axis of ``x``."""
    if w1.shape[0] != x.shape[-1] or w2.shape[0] != w1.shape[1]:
        raise ValueError(f"mlp2 dimension mismatch: x {x.shape}, W1 {w1.shape}, W2 {w2.shape}")
    act = gelu if activation == "gelu" else relu
    hidden = act(add(matmul(x, w1), b1))
    return add(matmul(hidden, w2), b2)
