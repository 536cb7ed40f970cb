"""Language-gated multi-level aggregation and the cross-scale feature aggregator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .core import FeatureKind, FeatureMap
from .text import LanguageFeatures

LOCAL_AGGREGATION_MODES = ("avgpool", "conv", "none")


@dataclass
class LmaConfig:
    pool_levels: tuple[int, ...] = (1, 3, 5)
    cross_attn_heads: int = 1
    gate_hidden: int | None = None  # defaults to the stage width
    local_aggregation: str = "avgpool"

    def __post_init__(self):
        self.pool_levels = tuple(self.pool_levels)
        _check_levels(self.pool_levels)
        if self.cross_attn_heads != 1:
            raise ValueError("only single-head cross attention is implemented")
        if self.local_aggregation not in LOCAL_AGGREGATION_MODES:
            raise ValueError(f"local_aggregation must be one of {LOCAL_AGGREGATION_MODES}")


def _check_levels(levels: Sequence[int]) -> None:
    if not levels:
        raise ValueError("at least one pooling level is required")
    for r in levels:
        if r < 1 or r % 2 == 0:
            raise ValueError(f"pooling window {r} must be odd and >= 1")


def multi_level_pool(fv: torch.Tensor, levels: Sequence[int] = (1, 3, 5)) -> torch.Tensor:
    """Sum of centred r x r stride-1 window means over ``levels``.

    Windows are clipped at the border and averaged over the in-bounds cells only,
    so the output keeps the (B, C, h, w) shape of the input.
    """
    _check_levels(levels)
    total = torch.zeros_like(fv)
    for r in levels:
        if r == 1:
            total = total + fv
        else:
            total = total + F.avg_pool2d(fv, r, stride=1, padding=r // 2, count_include_pad=False)
    return total


@dataclass
class AggregatedPyramid:
    """Three aggregated maps, lowest resolution first (H/16, H/8, H/4)."""

    maps: list[FeatureMap]

    def __post_init__(self):
        if len(self.maps) != 3:
            raise ValueError("aggregated pyramid holds exactly three maps")

    def __getitem__(self, k: int) -> FeatureMap:
        return self.maps[k]

    def __len__(self) -> int:
        return 3


class LocalConvAggregation(nn.Module):
    """Learned depthwise convolutions in place of the parameter-free pooling."""

    def __init__(self, channels: int, levels: Sequence[int]):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, r, padding=r // 2, groups=channels, bias=False) for r in levels
        )
        for conv in self.convs:
            nn.init.constant_(conv.weight, 1.0 / conv.kernel_size[0] ** 2)

    def forward(self, fv: torch.Tensor) -> torch.Tensor:
        return sum(conv(fv) for conv in self.convs)


class CrossModalAttention(nn.Module):
    """Single-head cross attention: pixels query the valid language tokens."""

    def __init__(self, visual_dim: int, language_dim: int, dim: int | None = None):
        super().__init__()
        dim = dim or visual_dim
        self.dim = dim
        self.q = nn.Linear(visual_dim, dim)
        self.k = nn.Linear(language_dim, dim)
        self.v = nn.Linear(language_dim, dim)
        self.out = nn.Linear(dim, visual_dim)

    def forward(self, fv: torch.Tensor, fl: LanguageFeatures) -> torch.Tensor:
        if bool((fl.valid_length < 1).any()):
            raise ValueError("cross attention needs at least one valid language token per sample")
        b, c, h, w = fv.shape
        q = self.q(fv.flatten(2).transpose(1, 2))
        k, v = self.k(fl.features), self.v(fl.features)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.dim)
        scores = scores.masked_fill(fl.padding_mask[:, None, :], float("-inf"))
        attended = scores.softmax(dim=-1) @ v
        return self.out(attended).transpose(1, 2).reshape(b, c, h, w)


class ElementwiseGate(nn.Module):
    """tanh(W2 relu(W1 x)) per pixel, with W1/W2 as 1x1 convolutions."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.fc2(F.relu(self.fc1(x))))


class LanguageGatedAggregation(nn.Module):
    """One LMA block for a single backbone stage."""

    def __init__(self, channels: int, language_dim: int, config: LmaConfig | None = None, out_channels: int | None = None):
        super().__init__()
        self.config = config or LmaConfig()
        self.levels = self.config.pool_levels
        self.local_conv = (
            LocalConvAggregation(channels, self.levels) if self.config.local_aggregation == "conv" else None
        )
        self.cross_attn = CrossModalAttention(channels, language_dim)
        self.gate = ElementwiseGate(channels, self.config.gate_hidden)
        out_channels = out_channels or channels
        self.residual_proj = nn.Conv2d(channels, out_channels, 1) if out_channels != channels else None

    def local_features(self, fv: torch.Tensor) -> torch.Tensor:
        mode = self.config.local_aggregation
        if mode == "avgpool":
            return multi_level_pool(fv, self.levels)
        if mode == "conv":
            return self.local_conv(fv)
        return torch.zeros_like(fv)

    def cross_modal_fuse(self, fv: torch.Tensor, fl: LanguageFeatures, ft: torch.Tensor | None = None) -> torch.Tensor:
        if ft is None:
            ft = self.local_features(fv)
        if ft.shape != fv.shape:
            raise ValueError(f"local features {tuple(ft.shape)} do not match visual map {tuple(fv.shape)}")
        return self.cross_attn(fv, fl) + ft

    def gate_and_inject(self, fv: torch.Tensor, fvl: torch.Tensor) -> torch.Tensor:
        if fv.shape[-2:] != fvl.shape[-2:]:
            raise ValueError("gate inputs must share spatial dims")
        gated = fvl * self.gate(fvl)
        if self.residual_proj is not None:
            gated = self.residual_proj(gated)
        return fv + gated

    def forward(self, fv: torch.Tensor, fl: LanguageFeatures) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (fused F_vl, residual output fed back to the backbone)."""
        fvl = self.cross_modal_fuse(fv, fl)
        return fvl, self.gate_and_inject(fv, fvl)


class MergeConv(nn.Module):
    """1x1 projection of the concatenation to C_t, then a residual 3x3 conv."""

    def __init__(self, in_channels: int, out_channels: int, skip: bool = True):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, 1)
        self.conv = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = skip

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.proj(x)
        y = self.conv(F.gelu(p))
        return p + y if self.skip else y


class PyramidAggregator(nn.Module):
    """Merge stage features deep to shallow into three maps of width C_t."""

    def __init__(self, stage_channels: Sequence[int], token_width: int):
        super().__init__()
        c1, c2, c3, c4 = stage_channels
        self.token_width = token_width
        self.merge = nn.ModuleList(
            [
                MergeConv(c3 + c4, token_width),
                MergeConv(c2 + token_width, token_width),
                MergeConv(c1 + token_width, token_width),
            ]
        )

    def forward(self, fvl: Sequence[FeatureMap | torch.Tensor]) -> AggregatedPyramid:
        maps = [m.data if isinstance(m, FeatureMap) else m for m in fvl]
        if len(maps) != 4:
            raise ValueError("aggregation needs four stage maps")
        for shallow, deep in zip(maps, maps[1:]):
            if shallow.shape[-2] != 2 * deep.shape[-2] or shallow.shape[-1] != 2 * deep.shape[-1]:
                raise ValueError("stage resolutions must halve from one stage to the next")
        out = []
        deeper = maps[3]
        for merge, shallow in zip(self.merge, (maps[2], maps[1], maps[0])):
            up = F.interpolate(deeper, size=shallow.shape[-2:], mode="nearest")
            deeper = merge(torch.cat([shallow, up], dim=1))
            out.append(FeatureMap(deeper, 3 - len(out), FeatureKind.AGGREGATED))
        return AggregatedPyramid(out)
