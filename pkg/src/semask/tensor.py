"""Minimal reverse-mode tensor engine on numpy.

Forward ops append nodes to a flat tape; ``backward`` replays the tape in
exact reverse order, so gradient accumulation order is deterministic.
Only the primitives the segmentation model needs are provided. Every op
checks its output for NaN/Inf and raises ``NonFiniteError`` on violation.

Default element type is float32; build tensors with ``dtype=np.float64``
for finite-difference gradient verification (see ``check_gradients``).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from semask import kernels

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _as_float(arr, dtype):
    a = np.asarray(arr, dtype=dtype)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return a


class Tensor:
    """N-dimensional array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "tracked")

    def __init__(self, data, tracked: bool = False, dtype=None):
        self.data = _as_float(data, dtype)
        self.grad: np.ndarray | None = None
        self.tracked = tracked

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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, tracked={self.tracked})"

    # arithmetic sugar; definitions below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mul(tsum(self), 1.0 / self.size)


class TapeNode:
    """One recorded forward op: inputs and the matching backward rule."""

    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_TAPE: list[TapeNode] = []
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def clear_tape() -> None:
    _TAPE.clear()


def tape_length() -> int:
    return len(_TAPE)


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.tracked for t in inputs):
        out.tracked = True
        _TAPE.append(TapeNode(op, inputs, out, bwd))
    return out


def _accumulate(t: Tensor, g: np.ndarray | None) -> None:
    if g is None or not t.tracked:
        return
    t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked leaf reachable from ``loss``.

    Consumes (clears) the tape.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        raise ValueError("backward requires a tracked loss")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(_TAPE):
            g = node.out.grad
            if g is None:
                continue
            grads = node.bwd(g)
            for t, gi in zip(node.inputs, grads):
                _accumulate(t, gi)
    finally:
        clear_tape()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        data = a.data + b

        def bwd(g):
            return (_unbroadcast(g, a.shape),)

        return _finish("add", data, (a,), bwd)
    data = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _finish("add", data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        data = a.data * b

        def bwd(g):
            return (_unbroadcast(g * b, a.shape),)

        return _finish("mul", data, (a,), bwd)
    data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _finish("mul", data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _finish("matmul", data, (a, b), bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _finish("sum", np.asarray(data), (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _finish("softmax", s, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},); got {gain.shape}/{bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _finish("layer_norm", out, (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    # exact Gaussian-CDF form x * Phi(x)
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi_cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi_cdf + x.data * pdf),)

    return _finish("gelu", out.astype(x.dtype, copy=False), (x,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(orig),)

    return _finish("reshape", data, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _finish("transpose", data, (x,), bwd)


def pad2d(x: Tensor, pad_b: int, pad_r: int) -> Tensor:
    """Zero-pad bottom/right of the H, W axes of [B, H, W, C]."""
    if pad_b == 0 and pad_r == 0:
        return x
    h, w = x.shape[1], x.shape[2]
    data = np.pad(x.data, ((0, 0), (0, pad_b), (0, pad_r), (0, 0)))

    def bwd(g):
        return (np.ascontiguousarray(g[:, :h, :w, :]),)

    return _finish("pad2d", data, (x,), bwd)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w region of the H, W axes of [B, H, W, C]."""
    if h == x.shape[1] and w == x.shape[2]:
        return x
    data = np.ascontiguousarray(x.data[:, :h, :w, :])

    def bwd(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :h, :w, :] = g
        return (full,)

    return _finish("crop2d", data, (x,), bwd)


def roll2d(x: Tensor, shift_h: int, shift_w: int) -> Tensor:
    """Torus roll of the H, W axes of [B, H, W, C]."""
    data = np.roll(x.data, (shift_h, shift_w), axis=(1, 2))

    def bwd(g):
        return (np.roll(g, (-shift_h, -shift_w), axis=(1, 2)),)

    return _finish("roll2d", data, (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = np.ascontiguousarray(x.data[idx])

    def bwd(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _finish("narrow", data, (x,), bwd)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup into a 2-d table, scatter-add on backward."""
    if table.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-d table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.intp).ravel()
    data = table.data[idx]

    def bwd(g):
        dt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(dt, idx, g)
        return (dt,)

    return _finish("take_rows", data, (table,), bwd)


# ---------------------------------------------------------------------------
# spatial kernels


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation over channel-last [B, H, W, C]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {x.shape}/{kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"conv2d supports kernel extents 1 or 3, got {kh}x{kw}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if padding == "same":
        pad_t, pad_l = (kh - 1) // 2, (kw - 1) // 2
        out_h, out_w = x.shape[1], x.shape[2]
    elif padding == "valid":
        pad_t = pad_l = 0
        out_h, out_w = x.shape[1] - kh + 1, x.shape[2] - kw + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv2d valid output would be empty for input {x.shape}")
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    data = kernels.conv2d_forward(np.ascontiguousarray(x.data),
                                  np.ascontiguousarray(kernel.data),
                                  pad_t, pad_l, out_h, out_w)
    inputs: tuple[Tensor, ...]
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
        data = data + bias.data
        inputs = (x, kernel, bias)
    else:
        inputs = (x, kernel)
    in_h, in_w = x.shape[1], x.shape[2]

    def bwd(g):
        g = np.ascontiguousarray(g)
        dx = kernels.conv2d_backward_input(g, np.ascontiguousarray(kernel.data),
                                           pad_t, pad_l, in_h, in_w)
        dk = kernels.conv2d_backward_kernel(np.ascontiguousarray(x.data), g,
                                            pad_t, pad_l, kh, kw)
        if bias is not None:
            return dx, dk, g.sum(axis=(0, 1, 2))
        return dx, dk

    return _finish("conv2d", data, inputs, bwd)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-center bilinear resampling of [B, H, W, C]."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear target must be >=1, got {out_h}x{out_w}")
    in_h, in_w = x.shape[1], x.shape[2]
    data = kernels.bilinear_forward(np.ascontiguousarray(x.data), out_h, out_w)

    def bwd(g):
        return (kernels.bilinear_backward(np.ascontiguousarray(g), in_h, in_w),)

    return _finish("resize_bilinear", data, (x,), bwd)


# ---------------------------------------------------------------------------
# fused loss


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int) -> Tensor:
    """Mean negative log-likelihood over rows whose label is not ignored.

    ``logits`` is [P, K]; ``labels`` is an int array of length P with values
    in [0, K) or equal to ``ignore_label``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [P, K] logits, got {logits.shape}")
    labels = np.asarray(labels).ravel()
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"labels length {labels.shape[0]} does not match logits rows {logits.shape[0]}"
        )
    k = logits.shape[1]
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"labels outside [0, {k}) present: {np.unique(labels[bad])}")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("all labels ignored; loss undefined")

    safe = np.where(valid, labels, 0).astype(np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = logp[np.arange(labels.shape[0]), safe]
    loss = -(picked * valid).sum() / count

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(labels.shape[0]), safe] -= 1.0
        p *= valid[:, None]
        return (p * (g / count),)

    return _finish("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient verification


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|). ``x``
    must be float64; float32 finite differences are too noisy to be a
    meaningful oracle.
    """
    if x.dtype != np.float64:
        raise ValueError("check_gradients requires a float64 input tensor")
    was_tracked = x.tracked
    x.tracked = True
    x.grad = None
    clear_tape()
    out = f(x)
    if out.size != 1:
        raise ValueError("check_gradients requires a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.tracked = was_tracked

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float((np.abs(analytic - numeric) / denom).max())
