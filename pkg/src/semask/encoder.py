"""Four-stage hierarchical encoder plus analytic parameter/MAC accounting.

Stage i runs at 1/2^(i+2) of the input resolution: a 4x4 patch embedding
feeds stage 0, and a 2x2 patch-merging reduction sits in front of each
later stage. Every stage is a transformer layer (alternating plain/shifted
window attention blocks) followed by a semantic layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from semask import tensor as T
from semask.params import ParamFactory
from semask.semantic import (SemanticLayerParams, SemanticPrior,
                             semantic_block_param_count, semantic_layer)
from semask.tensor import ShapeError, Tensor
from semask.windows import SwinBlockParams, swin_block

_PRESETS = {
    "tiny": dict(window=7, dims=(96, 192, 384, 768), depths=(2, 2, 6, 2),
                 heads=(3, 6, 12, 24)),
    "small": dict(window=7, dims=(96, 192, 384, 768), depths=(2, 2, 18, 2),
                  heads=(3, 6, 12, 24)),
    "base": dict(window=12, dims=(128, 256, 512, 1024), depths=(2, 2, 18, 2),
                 heads=(4, 8, 16, 32)),
    "large": dict(window=12, dims=(192, 384, 768, 1536), depths=(2, 2, 18, 2),
                  heads=(6, 12, 24, 48)),
    # synthetic desk-scale preset for tests and demos, not a published variant
    "toy": dict(window=4, dims=(16, 32, 64, 128), depths=(1, 1, 2, 1),
                heads=(1, 2, 4, 8)),
}

PRESET_NAMES = tuple(_PRESETS)


@dataclass
class EncoderConfig:
    window: int
    dims: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    heads: tuple[int, int, int, int]
    num_classes: int
    semantic_depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    patch_size: int = 4
    in_channels: int = 3

    def __post_init__(self):
        self.dims = tuple(self.dims)
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        self.semantic_depths = tuple(self.semantic_depths)
        for name in ("dims", "depths", "heads", "semantic_depths"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"EncoderConfig.{name} must have exactly 4 stages")
        for i in range(3):
            if self.dims[i + 1] != 2 * self.dims[i]:
                raise ValueError(f"stage dims must double: {self.dims}")
        for c, h in zip(self.dims, self.heads):
            if c % h != 0:
                raise ValueError(f"dim {c} not divisible by heads {h}")
        if any(d < 0 for d in self.depths):
            raise ValueError("depths must be >= 0")
        if any(d < 1 for d in self.semantic_depths):
            raise ValueError("semantic_depths must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.patch_size != 4:
            raise ValueError("patch_size is fixed at 4")

    @classmethod
    def preset(cls, name: str, num_classes: int,
               semantic_depths=(1, 1, 1, 1)) -> "EncoderConfig":
        if name not in _PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
        return cls(num_classes=num_classes, semantic_depths=semantic_depths,
                   **_PRESETS[name])

    def stage_extents(self, h: int, w: int) -> list[tuple[int, int]]:
        """Feature extents per stage for an h x w input (ceil at each halving)."""
        sh, sw = math.ceil(h / 4), math.ceil(w / 4)
        out = [(sh, sw)]
        for _ in range(3):
            sh, sw = math.ceil(sh / 2), math.ceil(sw / 2)
            out.append((sh, sw))
        return out


@dataclass
class PatchEmbedParams:
    weight: Tensor  # [patch*patch*in_ch, C1]
    bias: Tensor
    norm_gain: Tensor
    norm_bias: Tensor


@dataclass
class MergingParams:
    norm_gain: Tensor  # over 4C
    norm_bias: Tensor
    weight: Tensor     # [4C, 2C]
    bias: Tensor


@dataclass
class StageParams:
    blocks: list[SwinBlockParams]
    semantic: list[SemanticLayerParams]
    merging: MergingParams | None


@dataclass
class EncoderParams:
    embed: PatchEmbedParams
    stages: list[StageParams] = field(default_factory=list)


@dataclass
class StageOutput:
    features: Tensor          # [B, H_i, W_i, C_i], after the semantic layer
    prior: SemanticPrior | None
    pre_features: Tensor | None = None  # before the semantic layer


def build_swin_block_params(make: ParamFactory, prefix: str, c: int, heads: int,
                            window: int) -> SwinBlockParams:
    table = (2 * window - 1) ** 2
    return SwinBlockParams(
        norm1_gain=make(f"{prefix}.norm1.gain", (c,), "gain"),
        norm1_bias=make(f"{prefix}.norm1.bias", (c,), "bias"),
        qkv_weight=make(f"{prefix}.attn.qkv.weight", (c, 3 * c), "weight"),
        qkv_bias=make(f"{prefix}.attn.qkv.bias", (3 * c,), "bias"),
        proj_weight=make(f"{prefix}.attn.proj.weight", (c, c), "weight"),
        proj_bias=make(f"{prefix}.attn.proj.bias", (c,), "bias"),
        rpe_table=make(f"{prefix}.attn.rpe", (table, heads), "table"),
        norm2_gain=make(f"{prefix}.norm2.gain", (c,), "gain"),
        norm2_bias=make(f"{prefix}.norm2.bias", (c,), "bias"),
        mlp_weight1=make(f"{prefix}.mlp.fc1.weight", (c, 4 * c), "weight"),
        mlp_bias1=make(f"{prefix}.mlp.fc1.bias", (4 * c,), "bias"),
        mlp_weight2=make(f"{prefix}.mlp.fc2.weight", (4 * c, c), "weight"),
        mlp_bias2=make(f"{prefix}.mlp.fc2.bias", (c,), "bias"),
    )


def build_semantic_params(make: ParamFactory, prefix: str, c: int,
                          k: int) -> SemanticLayerParams:
    return SemanticLayerParams(
        query_weight=make(f"{prefix}.query.weight", (c, k), "weight"),
        query_bias=make(f"{prefix}.query.bias", (k,), "bias"),
        key_weight=make(f"{prefix}.key.weight", (c, k), "weight"),
        key_bias=make(f"{prefix}.key.bias", (k,), "bias"),
        out_weight=make(f"{prefix}.out.weight", (c, c), "weight"),
        out_bias=make(f"{prefix}.out.bias", (c,), "bias"),
        gate=make(f"{prefix}.gate", (), "gate"),
    )


def build_encoder_params(cfg: EncoderConfig, make: ParamFactory,
                         semantic: bool = True) -> EncoderParams:
    patch_in = cfg.patch_size * cfg.patch_size * cfg.in_channels
    embed = PatchEmbedParams(
        weight=make("patch_embed.weight", (patch_in, cfg.dims[0]), "weight"),
        bias=make("patch_embed.bias", (cfg.dims[0],), "bias"),
        norm_gain=make("patch_embed.norm.gain", (cfg.dims[0],), "gain"),
        norm_bias=make("patch_embed.norm.bias", (cfg.dims[0],), "bias"),
    )
    stages = []
    for i, c in enumerate(cfg.dims):
        merging = None
        if i > 0:
            prev = cfg.dims[i - 1]
            merging = MergingParams(
                norm_gain=make(f"stages.{i}.merging.norm.gain", (4 * prev,), "gain"),
                norm_bias=make(f"stages.{i}.merging.norm.bias", (4 * prev,), "bias"),
                weight=make(f"stages.{i}.merging.reduce.weight", (4 * prev, c), "weight"),
                bias=make(f"stages.{i}.merging.reduce.bias", (c,), "bias"),
            )
        blocks = [
            build_swin_block_params(make, f"stages.{i}.blocks.{j}", c,
                                    cfg.heads[i], cfg.window)
            for j in range(cfg.depths[i])
        ]
        sem = []
        if semantic:
            sem = [
                build_semantic_params(make, f"stages.{i}.semantic.{j}", c,
                                      cfg.num_classes)
                for j in range(cfg.semantic_depths[i])
            ]
        stages.append(StageParams(blocks=blocks, semantic=sem, merging=merging))
    return EncoderParams(embed=embed, stages=stages)


def patch_embed(image: Tensor, params: PatchEmbedParams, cfg: EncoderConfig) -> Tensor:
    """Flatten non-overlapping 4x4 patches and map them to the stage-0 width."""
    b, h, w, cin = image.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ShapeError(f"patch_embed needs extents divisible by {p}, got {h}x{w}")
    if cin != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {cin}")
    t = T.reshape(image, (b, h // p, p, w // p, p, cin))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    t = T.reshape(t, (b, h // p, w // p, p * p * cin))
    t = T.matmul(t, params.weight) + params.bias
    return T.layer_norm(t, params.norm_gain, params.norm_bias)


def patch_merging(x: Tensor, params: MergingParams) -> Tensor:
    """Concatenate 2x2 neighborhoods (pad odd extents), normalize, reduce to 2C."""
    b, h, w, c = x.shape
    x = T.pad2d(x, h % 2, w % 2)
    hp, wp = h + h % 2, w + w % 2
    t = T.reshape(x, (b, hp // 2, 2, wp // 2, 2, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    t = T.reshape(t, (b, hp // 2, wp // 2, 4 * c))
    t = T.layer_norm(t, params.norm_gain, params.norm_bias)
    return T.matmul(t, params.weight) + params.bias


def encoder_forward(image: Tensor, params: EncoderParams,
                    cfg: EncoderConfig) -> list[StageOutput]:
    """Run all four stages; returns per-stage features and semantic priors."""
    if image.shape[1] < cfg.patch_size or image.shape[2] < cfg.patch_size:
        raise ShapeError(f"image extents {image.shape[1:3]} below patch size")
    x = patch_embed(image, params.embed, cfg)
    outputs: list[StageOutput] = []
    for i, stage in enumerate(params.stages):
        if stage.merging is not None:
            x = patch_merging(x, stage.merging)
        for j, blk in enumerate(stage.blocks):
            x = swin_block(x, blk, cfg.heads[i], cfg.window, shifted=(j % 2 == 1))
        pre = x
        prior = None
        if stage.semantic:
            x, prior = semantic_layer(x, stage.semantic, cfg.window)
        outputs.append(StageOutput(features=x, prior=prior, pre_features=pre))
    return outputs


# ---------------------------------------------------------------------------
# analytic accounting (no instantiation)


def _swin_block_params(c: int, heads: int, window: int) -> int:
    return 12 * c * c + 13 * c + (2 * window - 1) ** 2 * heads


def count_params(cfg: EncoderConfig, decoder_width: int,
                 semantic: bool = True) -> dict[str, int]:
    """Exact per-component parameter counts for a model built from ``cfg``."""
    c1 = cfg.dims[0]
    embed = (cfg.patch_size ** 2 * cfg.in_channels) * c1 + c1 + 2 * c1
    blocks = sum(cfg.depths[i] * _swin_block_params(cfg.dims[i], cfg.heads[i], cfg.window)
                 for i in range(4))
    merging = sum(8 * cfg.dims[i] ** 2 + 10 * cfg.dims[i] for i in range(3))
    sem = 0
    if semantic:
        sem = sum(cfg.semantic_depths[i] *
                  semantic_block_param_count(cfg.dims[i], cfg.num_classes)
                  for i in range(4))
    d, k = decoder_width, cfg.num_classes
    lateral = sum(c * d + d for c in cfg.dims)
    smooth = sum(i * (9 * d * d + d) for i in range(4))
    classifier = d * k + k
    fpn = lateral + smooth + classifier
    backbone = embed + blocks + merging
    return {
        "patch_embed": embed,
        "transformer_blocks": blocks,
        "patch_merging": merging,
        "backbone": backbone,
        "semantic_layers": sem,
        "fpn_decoder": fpn,
        "semantic_decoder": 0,
        "total": backbone + sem + fpn,
    }


def count_flops(cfg: EncoderConfig, h: int, w: int, decoder_width: int,
                semantic: bool = True) -> dict[str, int]:
    """Multiply-accumulate counts for one forward pass at h x w input.

    Counts matmuls and convolutions only; norms, activations, additions and
    bilinear resampling are excluded. Attention terms use the zero-padded
    token count actually processed inside windows.
    """
    extents = cfg.stage_extents(h, w)
    m = cfg.window
    n = m * m
    c1 = cfg.dims[0]
    eh, ew = extents[0]
    embed = eh * ew * (cfg.patch_size ** 2 * cfg.in_channels) * c1

    attention = mlp = merging = sem = 0
    for i, (sh, sw) in enumerate(extents):
        c = cfg.dims[i]
        tokens = sh * sw
        padded = (math.ceil(sh / m) * m) * (math.ceil(sw / m) * m)
        attention += cfg.depths[i] * padded * (4 * c * c + 2 * n * c)
        mlp += cfg.depths[i] * tokens * 8 * c * c
        if i > 0:
            merging += tokens * 8 * cfg.dims[i - 1] ** 2
        if semantic:
            k = cfg.num_classes
            sem += cfg.semantic_depths[i] * padded * (2 * c * k + n * k + n * c + c * c)

    d, k = decoder_width, cfg.num_classes
    fpn = sum((sh * sw) * c * d for (sh, sw), c in zip(extents, cfg.dims))
    for i in range(4):
        for r in range(i):
            sh, sw = extents[i - r]
            fpn += sh * sw * 9 * d * d
    fpn += extents[0][0] * extents[0][1] * d * k

    backbone = embed + attention + mlp + merging
    return {
        "patch_embed": embed,
        "attention": attention,
        "mlp": mlp,
        "patch_merging": merging,
        "backbone": backbone,
        "semantic_layers": sem,
        "fpn_decoder": fpn,
        "semantic_decoder": 0,
        "total": backbone + sem + fpn,
    }
