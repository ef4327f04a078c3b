"""Vectorized numpy implementations of the hot kernels.

These are the fallback used when the compiled extension is unavailable.
Both backends implement identical index conventions:

* conv2d is stride-1 cross-correlation over channel-last [B, H, W, C] data
  with explicit top/left zero padding offsets.
* bilinear resize uses half-pixel source centers (align_corners=False) and
  the lerp form ``a + f * (b - a)`` so constant images survive exactly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _conv_windows(x: np.ndarray, kh: int, kw: int, pad_t: int, pad_l: int,
                  out_h: int, out_w: int) -> np.ndarray:
    b, h, w, c = x.shape
    pad_b = out_h + kh - 1 - pad_t - h
    pad_r = out_w + kw - 1 - pad_l - w
    if pad_t or pad_l or pad_b or pad_r:
        x = np.pad(x, ((0, 0), (pad_t, pad_b), (pad_l, pad_r), (0, 0)))
    # [B, out_h, out_w, C, kh, kw]
    return sliding_window_view(x, (kh, kw), axis=(1, 2))


def conv2d_forward(x: np.ndarray, k: np.ndarray, pad_t: int, pad_l: int,
                   out_h: int, out_w: int) -> np.ndarray:
    kh, kw = k.shape[0], k.shape[1]
    wins = _conv_windows(x, kh, kw, pad_t, pad_l, out_h, out_w)
    out = np.tensordot(wins, k, axes=([3, 4, 5], [2, 0, 1]))
    return np.ascontiguousarray(out)


def conv2d_backward_input(dout: np.ndarray, k: np.ndarray, pad_t: int,
                          pad_l: int, in_h: int, in_w: int) -> np.ndarray:
    kh, kw = k.shape[0], k.shape[1]
    # full correlation of dout with the spatially flipped kernel
    kf = k[::-1, ::-1]
    wins = _conv_windows(dout, kh, kw, kh - 1 - pad_t, kw - 1 - pad_l,
                         in_h, in_w)
    dx = np.tensordot(wins, kf, axes=([3, 4, 5], [3, 0, 1]))
    return np.ascontiguousarray(dx)


def conv2d_backward_kernel(x: np.ndarray, dout: np.ndarray, pad_t: int,
                           pad_l: int, kh: int, kw: int) -> np.ndarray:
    out_h, out_w = dout.shape[1], dout.shape[2]
    wins = _conv_windows(x, kh, kw, pad_t, pad_l, out_h, out_w)
    # contract batch and spatial axes: [C, kh, kw, Cout] -> [kh, kw, C, Cout]
    dk = np.tensordot(wins, dout, axes=([0, 1, 2], [0, 1, 2]))
    return np.ascontiguousarray(dk.transpose(1, 2, 0, 3))


def _resize_axis_coords(n_in: int, n_out: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source indices: (low, high, frac) per output index."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(dtype)
    return lo, hi, frac


def bilinear_forward(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    b, h, w, c = x.shape
    if out_h == h and out_w == w:
        return x.copy()
    y0, y1, fy = _resize_axis_coords(h, out_h, x.dtype)
    x0, x1, fx = _resize_axis_coords(w, out_w, x.dtype)
    fx = fx[None, None, :, None]
    rows0 = x[:, y0]
    rows1 = x[:, y1]
    # horizontal then vertical lerp; a + f*(b-a) keeps constants exact
    top = rows0[:, :, x0] + fx * (rows0[:, :, x1] - rows0[:, :, x0])
    bot = rows1[:, :, x0] + fx * (rows1[:, :, x1] - rows1[:, :, x0])
    return top + fy[None, :, None, None] * (bot - top)


def bilinear_backward(dout: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    b, out_h, out_w, c = dout.shape
    if out_h == in_h and out_w == in_w:
        return dout.copy()
    y0, y1, fy = _resize_axis_coords(in_h, out_h, dout.dtype)
    x0, x1, fx = _resize_axis_coords(in_w, out_w, dout.dtype)
    # scatter separably: width axis first, then height
    fxb = fx[None, None, :, None]
    tmp = np.zeros((b, out_h, in_w, c), dtype=dout.dtype)
    np.add.at(tmp, (slice(None), slice(None), x0), dout * (1.0 - fxb))
    np.add.at(tmp, (slice(None), slice(None), x1), dout * fxb)
    fyb = fy[None, :, None, None]
    dx = np.zeros((b, in_h, in_w, c), dtype=dout.dtype)
    np.add.at(dx, (slice(None), y0), tmp * (1.0 - fyb))
    np.add.at(dx, (slice(None), y1), tmp * fyb)
    return dx
