"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation executed while gradient tracking is enabled is
appended to the active :class:`GradTape`.  :func:`backward` replays that tape in
reverse, so graphs unrolled over time (the multi-timestep networks) get their
gradients summed over timesteps without any special handling.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "DimensionError",
    "StaleTapeError",
    "GradTape",
    "Tensor",
    "backward",
    "no_grad",
    "current_tape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "sqrt",
    "sigmoid",
    "arctan",
    "where",
    "sum",
    "mean",
    "reshape",
    "stack",
    "concat",
    "concat_channels",
    "conv2d",
    "max_pool2",
    "upsample2",
    "channel_norm",
    "spike",
]


class DimensionError(ValueError):
    """Raised when operand shapes are inconsistent."""


class StaleTapeError(RuntimeError):
    """Raised when backward is called on a graph whose tape was already replayed."""


class GradTape:
    """Ordered record of executed operations.

    Recording order is a topological order of the graph, so a reverse sweep
    visits every node exactly once after all of its consumers.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        self.nodes.append((out, parents, fn))

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


_local = threading.local()


def current_tape() -> GradTape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = _local.tape = GradTape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = current_tape()
        tape.record(out, tuple(parents), fn)
        out._tape = tape
    return out


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Reverse sweep over the tape that produced ``loss``.

    Leaf tensors accumulate into ``.grad``; contributions from fan-out and from
    every unrolled timestep add up.  The tape is cleared afterwards.
    """
    if loss.size != 1 and grad is None:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not produced by any recorded operation")
    if tape.consumed:
        raise StaleTapeError("tape already replayed; re-run the forward pass before calling backward")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    owned: set[int] = set()  # keys whose pending buffer may be updated in place
    for out, parents, fn in reversed(tape.nodes):
        g = pending.pop(id(out), None)
        owned.discard(id(out))
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if isinstance(pg, _SliceGrad):
                pg = pg.dense(p) if p.is_leaf else pg
            if p.is_leaf:
                p.grad = pg.astype(p.dtype, copy=True) if p.grad is None else p.grad + pg
                continue
            key = id(p)
            if isinstance(pg, _SliceGrad):
                buf = pending.get(key)
                if buf is None:
                    buf = np.zeros(p.shape, dtype=p.dtype)
                elif key not in owned:
                    buf = buf.copy()
                buf[pg.index] += pg.grad
                pending[key] = buf
                owned.add(key)
            elif key not in pending:
                pending[key] = pg
            elif key in owned:
                pending[key] += pg
            else:
                pending[key] = pending[key] + pg
                owned.add(key)
    tape.consumed = True
    tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def arctan(a: Tensor) -> Tensor:
    return _result(np.arctan(a.data), (a,), lambda g: (g / (1.0 + a.data * a.data),))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond, dtype=bool)
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = np.where(cond, a.data, b.data)

    def fn(g):
        zero = np.zeros_like(g)
        return (_unbroadcast(np.where(cond, g, zero), a.shape),
                _unbroadcast(np.where(cond, zero, g), b.shape))

    return _result(out, (a, b), fn)


# --- reductions and shape ----------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


class _SliceGrad:
    """Gradient that is non-zero only on ``index`` of its parent."""

    __slots__ = ("index", "grad")

    def __init__(self, index, grad):
        self.index = index
        self.grad = grad

    def dense(self, parent: Tensor) -> np.ndarray:
        full = np.zeros(parent.shape, dtype=parent.dtype)
        full[self.index] += self.grad
        return full


def _getitem(a: Tensor, index) -> Tensor:
    return _result(a.data[index], (a,), lambda g: (_SliceGrad(index, g),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (third from last)."""
    if a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise DimensionError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return concat([a, b], axis=a.ndim - 3)


# --- convolutional network ops ------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding.

    ``x`` is ``(..., C_in, H, W)``; any leading axes are treated as batch.
    ``weight`` is ``(C_out, C_in, k, k)`` with odd ``k``.
    """
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise DimensionError(f"kernel must be (C_out, C_in, k, k) with odd k, got {weight.shape}")
    if x.ndim < 3 or x.shape[-3] != weight.shape[1]:
        raise DimensionError(f"input {x.shape} does not match kernel {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    lead, (h, w) = x.shape[:-3], x.shape[-2:]
    n = int(np.prod(lead)) if lead else 1
    p = k // 2
    # im2col in channels-last order: rows (n, y, x), columns (ky, kx, c_in)
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c_in), dtype=x.dtype)
    xp[:, p:p + h, p:p + w, :] = x.data.reshape(n, c_in, h, w).transpose(0, 2, 3, 1)
    s = xp.strides
    cols = np.ascontiguousarray(
        as_strided(xp, (n, h, w, k, k, c_in), (s[0], s[1], s[2], s[1], s[2], s[3]))
    ).reshape(n * h * w, k * k * c_in)
    del xp
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2).reshape(*lead, c_out, h, w)

    def fn(g):
        g2 = np.ascontiguousarray(g.reshape(n, c_out, h, w).transpose(0, 2, 3, 1)).reshape(-1, c_out)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, h, w, k, k, c_in)
            dxp = np.zeros((n, h + 2 * p, w + 2 * p, c_in), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2).reshape(x.shape)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), parents, fn)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties route gradient to the first cell."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2 needs even spatial extent, got {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        routed = (np.arange(4) == arg[..., None]) * g[..., None]
        routed = routed.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(routed, -2, -3).reshape(x.shape),)

    return _result(out, (x,), fn)


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    # align_corners=False: output i samples source (i + 0.5) / 2 - 0.5
    src = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    m = np.zeros((2 * n, n), dtype=dtype)
    rows = np.arange(2 * n)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample2(x: Tensor, mode: str = "nearest") -> Tensor:
    """Double the two trailing axes by nearest replication or bilinear interpolation."""
    h, w = x.shape[-2:]
    if mode == "nearest":
        out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

        def fn(g):
            lead = g.shape[:-2]
            return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

        return _result(out, (x,), fn)
    if mode == "bilinear":
        mh = _bilinear_matrix(h, x.dtype)
        mw = _bilinear_matrix(w, x.dtype)
        out = mh @ x.data @ mw.T
        return _result(out, (x,), lambda g: (mh.T @ g @ mw,))
    raise ValueError(f"unknown upsample mode {mode!r}")


def channel_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5,
                 stats: tuple[np.ndarray, np.ndarray] | None = None,
                 per_step: bool = False):
    """Per-channel standardization followed by an affine map.

    Channels sit on axis -3.  Batch statistics are taken over every other axis,
    unless ``per_step`` is set, in which case axis 0 (time) keeps its own
    statistics.  Passing ``stats=(mean, var)`` normalizes with those constants
    instead (evaluation mode).

    Returns ``(output, batch_mean, batch_var)``; the moments are ``None`` when
    ``stats`` was supplied.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[-3]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"gain/bias must have shape ({c},)")
    bshape = (c, 1, 1)
    g_aff, b_aff = gain.data.reshape(bshape), bias.data.reshape(bshape)

    if stats is not None:
        m, v = (np.asarray(s, dtype=x.dtype).reshape(bshape) for s in stats)
        inv = 1.0 / np.sqrt(v + eps)
        xhat = (x.data - m) * inv
        out = xhat * g_aff + b_aff

        def fn_eval(g):
            return (g * g_aff * inv,
                    (g * xhat).reshape(-1, c, *x.shape[-2:]).sum(axis=(0, 2, 3)),
                    g.reshape(-1, c, *x.shape[-2:]).sum(axis=(0, 2, 3)))

        return _result(out, (x, gain, bias), fn_eval), None, None

    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3 and not (per_step and i == 0))
    m = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - m
    v = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = centered * inv
    out = xhat * g_aff + b_aff
    all_but_c = tuple(i for i in range(x.ndim) if i != x.ndim - 3)

    def fn(g):
        gx = None
        if x.requires_grad:
            gh = g * g_aff
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=all_but_c), g.sum(axis=all_but_c)

    batch_mean = m.mean(axis=0).reshape(c) if per_step else m.reshape(c)
    batch_var = v.mean(axis=0).reshape(c) if per_step else v.reshape(c)
    return _result(out, (x, gain, bias), fn), batch_mean, batch_var


def spike(x: Tensor, slope: float = 1.0, smooth: bool = False) -> Tensor:
    """Heaviside spike with an ArcTan surrogate derivative.

    Forward emits ``x >= 0`` as 0/1.  Backward uses the derivative of
    ``g(x) = arctan(pi * slope * x) / pi + 1/2``.  With ``smooth=True`` the
    forward also emits ``g(x)``; that variant exists for finite-difference
    checks of the backward path.
    """
    z = np.pi * slope * x.data
    with np.errstate(over="ignore", invalid="ignore"):
        dg = slope / (1.0 + z * z)
    dg = np.nan_to_num(dg, nan=0.0)
    if smooth:
        out = np.arctan(z) / np.pi + 0.5
    else:
        out = (x.data >= 0).astype(x.dtype)
    return _result(out.astype(x.dtype, copy=False), (x,), lambda g: (g * dg,))
