"""End-to-end referring anomaly segmenter."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .backbone import BackboneConfig, VisualBackbone
from .core import FeatureKind, FeatureMap, PredictionOutput
from .decoder import DecoderConfig, MaskGroupDecoder, MaskHead, NoAnomalyHead
from .lvle import AggregatedPyramid, LanguageGatedAggregation, LmaConfig, PyramidAggregator
from .text import DEFAULT_MAX_LEN, LanguageFeatures, TextEncoder


@dataclass
class ModelConfig:
    vocab_size: int
    text_dim: int = 64
    text_depth: int = 2
    text_heads: int = 4
    max_len: int = DEFAULT_MAX_LEN
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lma: LmaConfig = field(default_factory=LmaConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["backbone"] = BackboneConfig(**data.get("backbone", {}))
        data["lma"] = LmaConfig(**data.get("lma", {}))
        data["decoder"] = DecoderConfig(**data.get("decoder", {}))
        return cls(**data)


@dataclass
class Encoded:
    language: LanguageFeatures
    visual: list[FeatureMap]
    fused: list[FeatureMap]
    pyramid: AggregatedPyramid


class DQFormer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        channels = config.backbone.stage_channels
        width = config.decoder.token_width
        self.text_encoder = TextEncoder(config.vocab_size, config.text_dim, config.text_depth, config.text_heads)
        self.backbone = VisualBackbone(config.backbone)
        self.lma = nn.ModuleList(LanguageGatedAggregation(c, config.text_dim, config.lma) for c in channels)
        self.aggregator = PyramidAggregator(channels, width)
        self.decoder = MaskGroupDecoder(config.decoder, config.text_dim, width)
        self.mask_head = MaskHead(width)
        self.no_anomaly_head = NoAnomalyHead(width)

    def encode(self, image: torch.Tensor, tokens: torch.Tensor, valid_length: torch.Tensor) -> Encoded:
        language = self.text_encoder(tokens, valid_length)
        visual, fused = [], []
        current = self.backbone.stem_and_stage1(image)
        for stage in range(1, 5):
            visual.append(current)
            fvl, injected = self.lma[stage - 1](current.data, language)
            fused.append(FeatureMap(fvl, stage, FeatureKind.FUSED_VL))
            if stage < 4:
                current = self.backbone.next_stage(injected, stage)
        return Encoded(language, visual, fused, self.aggregator(fused))

    def forward(
        self,
        image: torch.Tensor,
        tokens: torch.Tensor,
        valid_length: torch.Tensor,
        noise: bool | None = None,
        generator: torch.Generator | None = None,
    ) -> PredictionOutput:
        enc = self.encode(image, tokens, valid_length)
        state, assignments = self.decoder(enc.language, enc.pyramid, noise=noise, generator=generator)
        mask_logits = self.mask_head(state.anomaly_token, enc.pyramid[2].data, image.shape[-2], image.shape[-1])
        return PredictionOutput(
            mask_logits=mask_logits,
            no_anomaly_logits=self.no_anomaly_head(state.background_token),
            intermediate_soft_masks=[a.anomaly_soft_map() for a in assignments],
            assignments=assignments,
        )
