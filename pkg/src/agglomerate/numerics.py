"""Dense float tensors with a replayable reverse-mode differentiation tape.

Forward arithmetic runs on numpy arrays. While a ``Tape`` is active (used as a
context manager), every primitive records a backward closure; ``backward``
replays the tape in reverse creation order, which is a valid reverse
topological order, and accumulates gradients into ``Tensor.grad``.

Every primitive checks its output for NaN/Inf and raises ``NumericError``
instead of letting non-finite values propagate into a training step. Tapes are
tracked per thread; concurrent use is safe only on disjoint tapes.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float32/float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Tape:
    """Ordered record of primitive operations for reverse-mode replay."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        if popped is not self:
            raise ContractError("tape context exited out of order")

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        self._nodes.append((out, inputs, fn))

    def __len__(self) -> int:
        return len(self._nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    Repeated calls accumulate; zero grads explicitly between steps.
    """
    if tape is None:
        tape = loss.tape
    if loss.size != 1:
        raise ContractError("backward requires a scalar loss")
    if tape is None or loss.tape is not tape:
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, fn in reversed(tape._nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, contrib in zip(inputs, fn(g)):
            if contrib is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
                owners[key] = t
    for key, g in grads.items():
        t = owners[key]
        t.grad = g if t.grad is None else t.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _make(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op} produced non-finite values")
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    out.grad = None
    out.tape = tape if track else None
    if track:
        tape._record(out, inputs, fn)
    return out


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-axes slice of ``a``'s shape.

    The only broadcasting supported anywhere: ``b.shape`` must equal
    ``a.shape[a.ndim - b.ndim:]`` (bias over the last axis, positional tables
    over the last two). Gradients for ``b`` sum over the leading axes.
    """
    _check_dtypes("add", a, b)
    lead = a.ndim - b.ndim
    if lead < 0 or a.shape[lead:] != b.shape:
        raise DimensionError(f"add: shape {b.shape} is not a trailing slice of {a.shape}")
    axes = tuple(range(lead))

    def fn(g):
        gb = g.sum(axis=axes) if axes else g
        return g, gb

    return _make("add", a.data + b.data, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("sub", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("div", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return g / bd, -g * ad / (bd * bd)

    return _make("div", out, (a, b), fn)


def mul_scalar(t: Tensor, s: float) -> Tensor:
    s = t.dtype.type(s)
    return _make("mul_scalar", t.data * s, (t,), lambda g: (g * s,))


def add_scalar(t: Tensor, s: float) -> Tensor:
    s = t.dtype.type(s)
    return _make("add_scalar", t.data + s, (t,), lambda g: (g,))


def neg(t: Tensor) -> Tensor:
    return mul_scalar(t, -1.0)


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(t.data)
    return _make("exp", out, (t,), lambda g: (g * out,))


def log(t: Tensor) -> Tensor:
    td = t.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(td)
    return _make("log", out, (t,), lambda g: (g / td,))


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = t.shape
    return _make("reshape", t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inverse),))


def reduce_sum(t: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    in_shape = t.shape
    if axes is None:
        norm_axes = tuple(range(t.ndim))
    else:
        norm_axes = tuple(ax % t.ndim for ax in axes)
    out = t.data.sum(axis=norm_axes if norm_axes else None)

    def fn(g):
        expanded = np.expand_dims(g, norm_axes) if norm_axes else g
        return (np.broadcast_to(expanded, in_shape).copy(),)

    return _make("reduce_sum", np.asarray(out), (t,), fn)


def reduce_mean(t: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        count = t.size
    else:
        count = 1
        for ax in axes:
            count *= t.shape[ax % t.ndim]
    return mul_scalar(reduce_sum(t, axes), 1.0 / count)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not tensors:
        raise DimensionError("stack: empty input")
    _check_dtypes("stack", *tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) > 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors])

    def fn(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make("stack", out, tuple(tensors), fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``b`` is either 2-D (shared weight) or batched with
    leading dims exactly matching ``a``'s."""
    _check_dtypes("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul requires at least 2-D operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dims {ad.shape[-1]} and {bd.shape[-2]} differ")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch dims {ad.shape[:-2]} and {bd.shape[:-2]} differ")

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), fn)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(t: Tensor) -> Tensor:
    td = t.data
    return _make("relu", np.maximum(td, 0.0), (t,), lambda g: (g * (td > 0),))


def gelu(t: Tensor) -> Tensor:
    """Tanh-approximation GELU, differentiable everywhere."""
    x = t.data
    inner = _GELU_K * (x + _GELU_C * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def fn(g):
        sech2 = 1.0 - th * th
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * dinner),)

    return _make("gelu", out, (t,), fn)


def softmax(t: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if t.ndim < 1 or t.shape[-1] < 1:
        raise DimensionError("softmax requires a non-empty last axis")
    x = t.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make("softmax", y, (t,), fn)


def log_softmax(t: Tensor) -> Tensor:
    if t.ndim < 1 or t.shape[-1] < 1:
        raise DimensionError("log_softmax requires a non-empty last axis")
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    sm = np.exp(out)

    def fn(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (t,), fn)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance per token over the last axis, then affine."""
    _check_dtypes("layer_norm", t, gain, bias)
    c = t.shape[-1] if t.ndim else 0
    if c < 1:
        raise DimensionError("layer_norm requires a non-empty channel axis")
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({c},)")
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + t.dtype.type(eps))
    xhat = xc * ivar
    out = gain.data * xhat + bias.data

    def fn(g):
        gt = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, c).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, c).sum(axis=0)
        if t.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gt = ivar * (dxhat - m1 - xhat * m2)
        return gt, ggain, gbias

    return _make("layer_norm", out, (t, gain, bias), fn)


# ---------------------------------------------------------------------------
# losses


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    _check_dtypes("mse_loss", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=a.dtype)

    def fn(g):
        scaled = g * (2.0 / n) * diff
        ga = scaled if a.requires_grad else None
        gb = -scaled if b.requires_grad else None
        return ga, gb

    return _make("mse_loss", out, (a, b), fn)


def cosine_loss(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Mean over tokens of 1 - cosine similarity along the last axis."""
    _check_dtypes("cosine_loss", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_loss: shapes {a.shape} and {b.shape} differ")
    if a.ndim < 1:
        raise DimensionError("cosine_loss requires at least one axis")
    ad, bd = a.data, b.data
    s = (ad * bd).sum(axis=-1)
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    denom = na * nb + a.dtype.type(eps)
    cos = s / denom
    tokens = max(cos.size, 1)
    out = np.asarray((1.0 - cos).mean(), dtype=a.dtype)

    def _unit(x, n):
        safe = np.where(n > 0, n, 1.0)[..., None]
        return np.where(n[..., None] > 0, x / safe, 0.0)

    def fn(g):
        gl = -g / tokens
        ga = gb = None
        if a.requires_grad:
            ga = gl * (bd / denom[..., None] - (s * nb / denom**2)[..., None] * _unit(ad, na))
        if b.requires_grad:
            gb = gl * (ad / denom[..., None] - (s * na / denom**2)[..., None] * _unit(bd, nb))
        return ga, gb

    return _make("cosine_loss", out, (a, b), fn)


# ---------------------------------------------------------------------------
# bilinear resampling


def _resize_coords(src: int, dst: int):
    """Corner-aligned source coordinates for a 1-D resize; midpoint when dst=1."""
    if dst == 1:
        pos = np.array([(src - 1) / 2.0])
    else:
        pos = np.arange(dst, dtype=np.float64) * ((src - 1) / (dst - 1))
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, pos - i0


def _scatter_add(dst: np.ndarray, axis: int, idx: np.ndarray, vals: np.ndarray) -> None:
    np.add.at(np.moveaxis(dst, axis, 0), idx, np.moveaxis(vals, axis, 0))


def bilinear_resize(t: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of axes 1 and 2 of a [batch, H, W, C] tensor.

    Corner-aligned: output corners sample input corners exactly, so matching
    extents reproduce the input bit for bit. Weights are convex, preserving
    per-channel bounds.
    """
    if t.ndim != 4:
        raise DimensionError("bilinear_resize expects [batch, H, W, C]")
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize target extents must be >= 1")
    x = t.data
    _, h, w, _ = x.shape
    r0, r1, rf = _resize_coords(h, out_h)
    c0, c1, cf = _resize_coords(w, out_w)
    rf = rf.astype(x.dtype)[None, :, None, None]
    cf = cf.astype(x.dtype)[None, None, :, None]
    rows = x[:, r0] * (1 - rf) + x[:, r1] * rf
    out = rows[:, :, c0] * (1 - cf) + rows[:, :, c1] * cf

    def fn(g):
        g_rows = np.zeros_like(rows)
        _scatter_add(g_rows, 2, c0, g * (1 - cf))
        _scatter_add(g_rows, 2, c1, g * cf)
        gx = np.zeros_like(x)
        _scatter_add(gx, 1, r0, g_rows * (1 - rf))
        _scatter_add(gx, 1, r1, g_rows * rf)
        return (gx,)

    return _make("bilinear_resize", out, (t,), fn)
