"""Semantic layer: class-space attention blocks with a gated residual.

Each block projects windowed features onto the class space (semantic query
and key, N x K per window), scores tokens with single-head attention over
the query-key product, re-mixes the feature values with those scores, and
adds the result back through a learnable scalar gate. The query map doubles
as the stage's semantic-prior output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semask import tensor as T
from semask.tensor import ShapeError, Tensor
from semask.windows import window_partition, window_reverse


@dataclass
class SemanticLayerParams:
    """Parameters of one semantic attention block."""

    query_weight: Tensor  # [C, K]
    query_bias: Tensor
    key_weight: Tensor    # [C, K]
    key_bias: Tensor
    out_weight: Tensor    # [C, C]
    out_bias: Tensor
    gate: Tensor          # scalar, the learnable residual weight


@dataclass
class SemanticPrior:
    """Per-stage unnormalized class-score map [B, H_i, W_i, K]."""

    map: Tensor

    @property
    def num_classes(self) -> int:
        return self.map.shape[-1]


def project_semantic(y_windows: Tensor, params: SemanticLayerParams) -> tuple[Tensor, Tensor]:
    """Affine maps of windowed features into the class space: (S_Q, S_K)."""
    sq = T.matmul(y_windows, params.query_weight) + params.query_bias
    sk = T.matmul(y_windows, params.key_weight) + params.key_bias
    return sq, sk


def semask_attention(sq: Tensor, sk: Tensor, yv: Tensor) -> Tensor:
    """Single-head attention: row-softmax(S_Q S_K^T) @ Y_V, no scale factor."""
    if sq.shape != sk.shape:
        raise ShapeError(f"semantic query/key shapes differ: {sq.shape} vs {sk.shape}")
    if sq.shape[:-1] != yv.shape[:-1]:
        raise ShapeError(
            f"semantic score rows {sq.shape[:-1]} do not match values {yv.shape[:-1]}"
        )
    axes = tuple(range(sk.ndim - 2)) + (sk.ndim - 1, sk.ndim - 2)
    logits = T.matmul(sq, T.transpose(sk, axes))
    return T.matmul(T.softmax(logits, axis=-1), yv)


def _block_forward(y_pre: Tensor, params: SemanticLayerParams, window: int,
                   sq_windows: Tensor | None) -> tuple[Tensor, SemanticPrior, Tensor]:
    win, grid = window_partition(y_pre, window)
    if sq_windows is None:
        sq = T.matmul(win, params.query_weight) + params.query_bias
    else:
        sq = sq_windows
    sk = T.matmul(win, params.key_weight) + params.key_bias
    scored = semask_attention(sq, sk, win)
    masked = T.matmul(scored, params.out_weight) + params.out_bias
    y_post = y_pre + params.gate * window_reverse(masked, grid)
    prior = SemanticPrior(window_reverse(sq, grid))
    return y_post, prior, sq


def semask_block_forward(y_pre: Tensor, params: SemanticLayerParams,
                         window: int) -> tuple[Tensor, SemanticPrior]:
    """One semantic block over unshifted M-windows of [B, H, W, C]."""
    y_post, prior, _ = _block_forward(y_pre, params, window, None)
    return y_post, prior


def semantic_layer(y: Tensor, params_list: list[SemanticLayerParams],
                   window: int) -> tuple[Tensor, SemanticPrior]:
    """Stack of semantic blocks; blocks after the first reuse the first
    block's query projection instead of recomputing it from features."""
    if not params_list:
        raise ValueError("semantic_layer needs at least one block")
    sq: Tensor | None = None
    prior: SemanticPrior | None = None
    for params in params_list:
        y, prior, sq = _block_forward(y, params, window, sq)
    return y, prior


def semantic_block_param_count(channels: int, num_classes: int) -> int:
    """Closed-form parameter count of one block: projections, mix, gate."""
    c, k = channels, num_classes
    return 2 * (c * k + k) + (c * c + c) + 1
