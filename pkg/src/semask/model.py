"""Full segmentation model: encoder, both decoders, x4 output upscale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semask import tensor as T
from semask.decoders import FpnParams, build_fpn_params, fpn_decode, \
    semantic_decode, upscale_to_input
from semask.encoder import EncoderConfig, EncoderParams, StageOutput, \
    build_encoder_params, encoder_forward
from semask.params import ParamFactory
from semask.tensor import Tensor


@dataclass
class ModelOutput:
    main: Tensor                    # [B, H, W, K] logits from the feature decoder
    prior: Tensor | None            # [B, H, W, K] logits from the prior decoder
    stages: list[StageOutput]


class SegModel:
    """Owns all parameters under canonical names and runs the forward pass.

    ``semantic=False`` builds the plain windowed-attention baseline: the
    semantic layers are absent and the prior output is None.
    """

    def __init__(self, cfg: EncoderConfig, decoder_width: int, seed: int = 0,
                 dtype=np.float32, semantic: bool = True, init: str = "random"):
        self.cfg = cfg
        self.decoder_width = decoder_width
        self.semantic = semantic
        self.seed = seed
        factory = ParamFactory(seed, dtype=dtype, mode=init)
        self.encoder: EncoderParams = build_encoder_params(cfg, factory, semantic=semantic)
        self.fpn: FpnParams = build_fpn_params(factory, cfg.dims, decoder_width,
                                               cfg.num_classes)
        self.params: dict[str, Tensor] = factory.registry

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(sorted(self.params.items()))

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def forward(self, images) -> ModelOutput:
        """images: [B, H, W, 3] array or Tensor, already normalized."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        b, h, w, _ = x.shape
        x = T.pad2d(x, (-h) % 4, (-w) % 4)
        stages = encoder_forward(x, self.encoder, self.cfg)
        main = fpn_decode([s.features for s in stages], self.fpn)
        main = upscale_to_input(main, h, w)
        prior = None
        if self.semantic:
            prior = semantic_decode([s.prior for s in stages])
            prior = upscale_to_input(prior, h, w)
        return ModelOutput(main=main, prior=prior, stages=stages)

    def __call__(self, images) -> ModelOutput:
        return self.forward(images)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None
