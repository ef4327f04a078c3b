"""Shifted-window multi-head self-attention layer.

Feature maps are channel-last [B, H, W, C]. Windows are M x M token groups;
maps whose extents are not multiples of M are zero-padded bottom/right and
the padded tokens are masked out of attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from semask import tensor as T
from semask.tensor import ShapeError, Tensor

MASK_VALUE = -1e9  # large-but-finite so gradients never see an Inf


@dataclass
class WindowGrid:
    """Bookkeeping for one window partition of a [B, H, W, C] map."""

    window: int
    batch: int
    height: int
    width: int
    pad_h: int
    pad_w: int

    @property
    def padded_h(self) -> int:
        return self.height + self.pad_h

    @property
    def padded_w(self) -> int:
        return self.width + self.pad_w

    @property
    def windows_h(self) -> int:
        return self.padded_h // self.window

    @property
    def windows_w(self) -> int:
        return self.padded_w // self.window

    @property
    def num_windows(self) -> int:
        """Windows per image."""
        return self.windows_h * self.windows_w

    @property
    def tokens(self) -> int:
        return self.window * self.window

    def token_origins(self) -> tuple[np.ndarray, np.ndarray]:
        """Canvas (h, w) coordinates of every window token, [nW, M*M] each."""
        m = self.window
        hh = np.arange(self.padded_h)
        ww = np.arange(self.padded_w)
        h_grid = np.broadcast_to(hh[:, None], (self.padded_h, self.padded_w))
        w_grid = np.broadcast_to(ww[None, :], (self.padded_h, self.padded_w))
        part = lambda a: (
            a.reshape(self.windows_h, m, self.windows_w, m)
            .transpose(0, 2, 1, 3)
            .reshape(self.num_windows, m * m)
        )
        return part(h_grid), part(w_grid)

    def padding_mask(self) -> np.ndarray:
        """Boolean [nW, M*M]: True where a token is zero padding."""
        hh, ww = self.token_origins()
        return (hh >= self.height) | (ww >= self.width)


@dataclass
class SwinBlockParams:
    """Parameters of one pre-norm windowed attention block."""

    norm1_gain: Tensor
    norm1_bias: Tensor
    qkv_weight: Tensor   # [C, 3C]
    qkv_bias: Tensor
    proj_weight: Tensor  # [C, C]
    proj_bias: Tensor
    rpe_table: Tensor    # [(2M-1)^2, heads]
    norm2_gain: Tensor
    norm2_bias: Tensor
    mlp_weight1: Tensor  # [C, 4C]
    mlp_bias1: Tensor
    mlp_weight2: Tensor  # [4C, C]
    mlp_bias2: Tensor


@lru_cache(maxsize=None)
def relative_position_index(window: int) -> np.ndarray:
    """Flat [(M*M)^2] lookup indices (dh + M - 1) * (2M - 1) + (dw + M - 1)."""
    m = window
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    idx = (rel[0] + m - 1) * (2 * m - 1) + (rel[1] + m - 1)
    return idx.ravel().astype(np.intp)


def window_partition(x: Tensor, window: int) -> tuple[Tensor, WindowGrid]:
    """Tile [B, H, W, C] into [B*nW, M*M, C]; pads bottom/right to multiples of M."""
    if window < 1:
        raise ValueError(f"window size must be >= 1, got {window}")
    if x.ndim != 4:
        raise ShapeError(f"window_partition expects [B, H, W, C], got {x.shape}")
    b, h, w, c = x.shape
    pad_h = (-h) % window
    pad_w = (-w) % window
    grid = WindowGrid(window, b, h, w, pad_h, pad_w)
    xp = T.pad2d(x, pad_h, pad_w)
    m = window
    t = T.reshape(xp, (b, grid.windows_h, m, grid.windows_w, m, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (b * grid.num_windows, m * m, c)), grid


def window_reverse(w: Tensor, grid: WindowGrid) -> Tensor:
    """Exact inverse of window_partition; padding is discarded."""
    m = grid.window
    expected = (grid.batch * grid.num_windows, m * m)
    if w.ndim != 3 or w.shape[:2] != expected:
        raise ShapeError(
            f"windows shape {w.shape} inconsistent with grid (expected {expected} + channels)"
        )
    c = w.shape[2]
    t = T.reshape(w, (grid.batch, grid.windows_h, grid.windows_w, m, m, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    t = T.reshape(t, (grid.batch, grid.padded_h, grid.padded_w, c))
    return T.crop2d(t, grid.height, grid.width)


def cyclic_shift(x: Tensor, shift: int) -> Tensor:
    """Torus roll of [B, H, W, C] by (-shift, -shift); invert with -shift."""
    if shift == 0:
        return x
    return T.roll2d(x, -shift, -shift)


def shift_attention_mask(grid: WindowGrid, shift: int, dtype=np.float32) -> np.ndarray:
    """[nW, N, N] additive mask: MASK_VALUE where token pairs must not attend.

    A pair is blocked when the two tokens came from different pre-shift
    regions of the torus, or when either one is padding.
    """
    if shift < 0:
        raise ValueError("shift must be >= 0")

    def axis_regions(n: int, padded: int) -> np.ndarray:
        r = np.zeros(padded, dtype=np.int64)
        if shift > 0:
            r[max(n - shift, 0):n] = 1  # content wrapped around the torus
        return r

    rh = axis_regions(grid.height, grid.padded_h)
    rw = axis_regions(grid.width, grid.padded_w)
    region = rh[:, None] * 2 + rw[None, :]
    m = grid.window
    win_region = (
        region.reshape(grid.windows_h, m, grid.windows_w, m)
        .transpose(0, 2, 1, 3)
        .reshape(grid.num_windows, m * m)
    )
    pad = grid.padding_mask()
    blocked = win_region[:, :, None] != win_region[:, None, :]
    blocked |= pad[:, :, None] | pad[:, None, :]
    return np.where(blocked, MASK_VALUE, 0.0).astype(dtype)


def window_msa(tokens: Tensor, params: SwinBlockParams, mask: np.ndarray | None,
               heads: int) -> Tensor:
    """Multi-head attention within each window of [nW*B, N, C]."""
    bw, n, c = tokens.shape
    if c % heads != 0:
        raise ShapeError(f"channels {c} not divisible by heads {heads}")
    d = c // heads

    qkv = T.matmul(tokens, params.qkv_weight) + params.qkv_bias
    q = T.narrow(qkv, 2, 0, c)
    k = T.narrow(qkv, 2, c, 2 * c)
    v = T.narrow(qkv, 2, 2 * c, 3 * c)

    def to_heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (bw, n, heads, d)), (0, 2, 1, 3))

    q, k, v = to_heads(q), to_heads(k), to_heads(v)
    attn = T.matmul(q * (1.0 / math.sqrt(d)), T.transpose(k, (0, 1, 3, 2)))

    m = int(round(np.sqrt(n)))
    if m * m != n:
        raise ShapeError(f"token count {n} is not a square window")
    rpe = T.take_rows(params.rpe_table, relative_position_index(m))
    rpe = T.transpose(T.reshape(rpe, (n, n, heads)), (2, 0, 1))
    attn = attn + T.reshape(rpe, (1, heads, n, n))

    if mask is not None:
        nw = mask.shape[0]
        b = bw // nw
        attn = T.reshape(attn, (b, nw, heads, n, n))
        attn = attn + mask[:, None]
        attn = T.reshape(attn, (bw, heads, n, n))

    attn = T.softmax(attn, axis=-1)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bw, n, c))
    return T.matmul(out, params.proj_weight) + params.proj_bias


def swin_block(x: Tensor, params: SwinBlockParams, heads: int, window: int,
               shifted: bool, shift: int | None = None) -> Tensor:
    """Pre-norm block: x + W-MSA(LN(x)), then + MLP(LN(.)).

    ``shift`` overrides the default floor(M/2) shift of shifted blocks
    (used by equivalence tests).
    """
    if shift is None:
        shift = window // 2 if shifted else 0
    h = T.layer_norm(x, params.norm1_gain, params.norm1_bias)
    h = cyclic_shift(h, shift)
    win, grid = window_partition(h, window)
    if shift > 0 or grid.pad_h or grid.pad_w:
        mask = shift_attention_mask(grid, shift, dtype=x.dtype)
    else:
        mask = None
    att = window_msa(win, params, mask, heads)
    h = window_reverse(att, grid)
    h = cyclic_shift(h, -shift)
    x = x + h

    h = T.layer_norm(x, params.norm2_gain, params.norm2_bias)
    h = T.matmul(h, params.mlp_weight1) + params.mlp_bias1
    h = T.gelu(h)
    h = T.matmul(h, params.mlp_weight2) + params.mlp_bias2
    return x + h
