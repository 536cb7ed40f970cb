"""Four-stage hierarchical visual encoder with global attention per stage.

Stage 1 sits at stride 4. Every later stage halves the resolution and widens the
channels. Each stage exposes its raw output so that the language-gated fusion can
replace it before the next stage runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .core import FeatureKind, FeatureMap
from .layers import TransformerBlock, sinusoidal_positions_2d

PATCH_STRIDE = 4


@dataclass
class BackboneConfig:
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    blocks_per_stage: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    attention_heads: int = 4

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("backbone needs exactly four stages")
        if any(c <= 0 for c in self.stage_channels) or any(b < 0 for b in self.blocks_per_stage):
            raise ValueError("stage channels must be positive and block counts non-negative")
        if any(a >= b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError("stage channels must be strictly increasing")


def _tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


def _grid(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, h, w)


class Stage(nn.Module):
    def __init__(self, in_dim: int, dim: int, depth: int, heads: int, pool: int, positional: bool):
        super().__init__()
        self.pool = pool
        self.positional = positional
        self.embed = nn.Linear(in_dim, dim)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.avg_pool2d(x, self.pool)
        h, w = x.shape[-2:]
        t = self.embed(_tokens(x))
        if self.positional:
            pos = sinusoidal_positions_2d(h, w, t.shape[-1], t.dtype, t.device)
            t = t + _tokens(pos[None])
        for block in self.blocks:
            t = block(t)
        return _grid(t, h, w)


class VisualBackbone(nn.Module):
    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        ch, depth, heads = self.config.stage_channels, self.config.blocks_per_stage, self.config.attention_heads
        self.stages = nn.ModuleList(
            [Stage(3, ch[0], depth[0], heads, PATCH_STRIDE, positional=True)]
            + [Stage(ch[i - 1], ch[i], depth[i], heads, 2, positional=False) for i in range(1, 4)]
        )

    def stem_and_stage1(self, image: torch.Tensor) -> FeatureMap:
        """``image`` is (B, 3, H, W) with H and W multiples of 32."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) image batch, got {tuple(image.shape)}")
        if image.shape[-2] % 32 or image.shape[-1] % 32:
            raise ValueError(f"image size {tuple(image.shape[-2:])} is not a multiple of 32")
        return FeatureMap(self.stages[0](image), 1, FeatureKind.RAW_VISUAL)

    def next_stage(self, fused_prev: FeatureMap | torch.Tensor, stage: int) -> FeatureMap:
        """Run stage ``stage + 1`` on the (fused) output of ``stage``."""
        if stage not in (1, 2, 3):
            raise ValueError(f"next_stage expects stage in 1..3, got {stage}")
        x = fused_prev.data if isinstance(fused_prev, FeatureMap) else fused_prev
        return FeatureMap(self.stages[stage](x), stage + 1, FeatureKind.RAW_VISUAL)

    def forward(self, image: torch.Tensor) -> list[FeatureMap]:
        """Plain forward without language injection."""
        maps = [self.stem_and_stage1(image)]
        for stage in (1, 2, 3):
            maps.append(self.next_stage(maps[-1], stage))
        return maps
