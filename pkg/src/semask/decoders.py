"""The two aggregation heads.

The feature decoder is FPN-style: per-stage 1x1 laterals into a shared
width, coarse stages refined by repeated (3x3 conv, x2 bilinear) rounds
until quarter scale, sum fusion, 1x1 classifier. The prior decoder is
parameter-free: upsample every stage's class-score map to quarter scale
and sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from semask import tensor as T
from semask.params import ParamFactory
from semask.semantic import SemanticPrior
from semask.tensor import ShapeError, Tensor


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor


@dataclass
class FpnParams:
    lateral: list[ConvParams]        # one 1x1 conv per stage, C_i -> D
    smooth: list[list[ConvParams]]   # stage i gets i rounds of 3x3 D -> D
    classifier: ConvParams           # 1x1, D -> K


def build_fpn_params(make: ParamFactory, dims: tuple[int, ...], width: int,
                     num_classes: int) -> FpnParams:
    lateral = [
        ConvParams(
            weight=make(f"fpn.lateral.{i}.weight", (1, 1, c, width), "weight"),
            bias=make(f"fpn.lateral.{i}.bias", (width,), "bias"),
        )
        for i, c in enumerate(dims)
    ]
    smooth = [
        [
            ConvParams(
                weight=make(f"fpn.smooth.{i}.{r}.weight", (3, 3, width, width), "weight"),
                bias=make(f"fpn.smooth.{i}.{r}.bias", (width,), "bias"),
            )
            for r in range(i)
        ]
        for i in range(len(dims))
    ]
    classifier = ConvParams(
        weight=make("fpn.classifier.weight", (1, 1, width, num_classes), "weight"),
        bias=make("fpn.classifier.bias", (num_classes,), "bias"),
    )
    return FpnParams(lateral=lateral, smooth=smooth, classifier=classifier)


def _check_schedule(features: list[Tensor]) -> list[tuple[int, int]]:
    extents = [(f.shape[1], f.shape[2]) for f in features]
    for i in range(1, len(extents)):
        want = (math.ceil(extents[i - 1][0] / 2), math.ceil(extents[i - 1][1] / 2))
        if extents[i] != want:
            raise ShapeError(
                f"stage {i} extents {extents[i]} break the halving schedule "
                f"(expected {want} after {extents[i - 1]})"
            )
    return extents


def fpn_decode(features: list[Tensor], params: FpnParams) -> Tensor:
    """Fuse the four stage features into quarter-scale class logits."""
    if len(features) != len(params.lateral):
        raise ShapeError(f"expected {len(params.lateral)} stage features, got {len(features)}")
    extents = _check_schedule(features)
    fused: Tensor | None = None
    for i, feat in enumerate(features):
        y = T.conv2d(feat, params.lateral[i].weight, params.lateral[i].bias, "same")
        for r, conv in enumerate(params.smooth[i]):
            y = T.conv2d(y, conv.weight, conv.bias, "same")
            th, tw = extents[i - r - 1]
            y = T.resize_bilinear(y, th, tw)
        fused = y if fused is None else fused + y
    return T.conv2d(fused, params.classifier.weight, params.classifier.bias, "same")


def semantic_decode(priors: list[SemanticPrior]) -> Tensor:
    """Parameter-free fusion: upsample each prior to quarter scale and sum."""
    if not priors:
        raise ValueError("semantic_decode needs at least one prior")
    k = priors[0].num_classes
    for i, p in enumerate(priors):
        if p.num_classes != k:
            raise ShapeError(
                f"prior {i} has {p.num_classes} channels, expected {k}"
            )
    th, tw = priors[0].map.shape[1], priors[0].map.shape[2]
    out: Tensor | None = None
    for p in priors:
        y = T.resize_bilinear(p.map, th, tw)
        out = y if out is None else out + y
    return out


def upscale_to_input(logits: Tensor, height: int, width: int) -> Tensor:
    """Bilinear x4, then crop away any right/bottom padding remainder."""
    up = T.resize_bilinear(logits, 4 * logits.shape[1], 4 * logits.shape[2])
    return T.crop2d(up, height, width)
