"""Mask group decoder: dual query tokens, masked self-attention, Gumbel grouping and heads."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import GroupAssignment, Label, PredictionOutput, QueryState
from .lvle import AggregatedPyramid
from .text import LanguageFeatures

log = logging.getLogger(__name__)

NUM_LAYERS = 3


@dataclass
class DecoderConfig:
    token_width: int = 64
    gumbel_tau_init: float = 1.0
    tau_min: float = 0.05
    inference_noise: bool = False
    masked_attention: bool = True
    background_tokens: int = 1
    normalize_groups: bool = False

    def __post_init__(self):
        if self.token_width <= 0:
            raise ValueError("token_width must be positive")
        if self.tau_min <= 0 or self.gumbel_tau_init <= 0:
            raise ValueError("temperatures must be positive")
        if self.background_tokens < 1:
            raise ValueError("at least one background token is required")


def build_attention_mask(
    length: int, valid_length: int, masked: bool = True, background_tokens: int = 1
) -> torch.Tensor:
    """Additive mask over the sequence [A; B_1..B_n; language tokens].

    With ``masked`` the background rows only see the query tokens and the
    language rows only see the valid language tokens. Padding columns are
    always blocked.
    """
    if not 0 <= valid_length <= length:
        raise ValueError(f"valid_length {valid_length} outside 0..{length}")
    nq = 1 + background_tokens
    size = nq + length
    neg = float("-inf")
    mask = torch.zeros(size, size, dtype=torch.float64)
    mask[:, nq + valid_length :] = neg
    if masked:
        mask[1:nq, nq:] = neg
        mask[nq:, :nq] = neg
    return mask


def build_attention_masks(length: int, valid_length: torch.Tensor, masked: bool = True, background_tokens: int = 1):
    return torch.stack(
        [build_attention_mask(length, int(v), masked, background_tokens) for v in valid_length.tolist()]
    )


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, hard, soft):
        return hard.clone()

    @staticmethod
    def backward(ctx, grad):
        return None, grad


def straight_through(hard: torch.Tensor, soft: torch.Tensor) -> torch.Tensor:
    """Forward value ``hard`` exactly; gradient routed to ``soft`` unchanged."""
    return _StraightThrough.apply(hard.detach(), soft)


def gumbel_assign(
    s_pixel: torch.Tensor, tau: torch.Tensor | float, noise: bool, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Soft and straight-through hard assignment over the token axis (dim -2)."""
    logits = s_pixel
    if noise:
        u = torch.rand(s_pixel.shape, generator=generator, dtype=s_pixel.dtype, device=s_pixel.device)
        u = u.clamp(torch.finfo(s_pixel.dtype).tiny, 1.0)
        logits = logits - torch.log(-torch.log(u))
    soft = (logits / tau).softmax(dim=-2)
    index = soft.argmax(dim=-2, keepdim=True)
    hard = torch.zeros_like(soft).scatter_(-2, index, 1.0)
    return soft, straight_through(hard, soft)


class MaskedSelfAttention(nn.Module):
    def __init__(self, dim: int, masked: bool = True, background_tokens: int = 1):
        super().__init__()
        self.dim = dim
        self.masked = masked
        self.background_tokens = background_tokens
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)

    def attend(self, queries: torch.Tensor, language: torch.Tensor, valid_length: torch.Tensor) -> torch.Tensor:
        """Raw attention output for the query rows, before residual and norm."""
        nq = queries.shape[1]
        if nq != 1 + self.background_tokens:
            raise ValueError(f"expected {1 + self.background_tokens} query tokens, got {nq}")
        seq = torch.cat([queries, language], dim=1)
        mask = build_attention_masks(language.shape[1], valid_length, self.masked, self.background_tokens)
        mask = mask.to(seq.dtype).to(seq.device)
        scores = self.q(seq) @ self.k(seq).transpose(1, 2) / math.sqrt(self.dim) + mask
        # Language rows of an all-padding expression see nothing; their output is discarded.
        attn = torch.nan_to_num(scores.softmax(dim=-1), nan=0.0)
        return self.out(attn @ self.v(seq))[:, :nq]

    def forward(self, queries: torch.Tensor, language: torch.Tensor, valid_length: torch.Tensor) -> torch.Tensor:
        if not (torch.isfinite(queries).all() and torch.isfinite(language).all()):
            raise ValueError("non-finite input to masked self-attention")
        return self.norm(queries + self.attend(queries, language, valid_length))


class GroupBlock(nn.Module):
    def __init__(self, dim: int, visual_dim: int | None = None, tau_init: float = 1.0, tau_min: float = 0.05,
                 normalize_groups: bool = False):
        super().__init__()
        self.tau_min = tau_min
        self.normalize_groups = normalize_groups
        self.token_proj = nn.Linear(dim, dim, bias=False)
        self.feature_proj = nn.Linear(visual_dim or dim, dim, bias=False)
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
        self.norm = nn.LayerNorm(dim)
        self._warned = False

    @property
    def tau(self) -> torch.Tensor:
        tau = self.log_tau.exp()
        if tau.item() < self.tau_min:
            if not self._warned:
                log.warning("gumbel temperature %.4g below floor, clamped to %.4g", tau.item(), self.tau_min)
                self._warned = True
            return tau.clamp(min=self.tau_min)
        return tau

    def forward(
        self, tokens: torch.Tensor, fa: torch.Tensor, noise: bool = False, generator: torch.Generator | None = None
    ) -> tuple[GroupAssignment, torch.Tensor]:
        h, w = fa.shape[-2:]
        t_proj = self.token_proj(tokens)
        f_proj = self.feature_proj(fa.flatten(2).transpose(1, 2))
        t_norm, f_norm = t_proj.norm(dim=-1, keepdim=True), f_proj.norm(dim=-1, keepdim=True)
        if bool((t_norm == 0).any()) or bool((f_norm == 0).any()):
            raise ValueError("zero-norm projected row; cosine similarity undefined")
        s_pixel = (t_proj / t_norm) @ (f_proj / f_norm).transpose(1, 2)
        s_gumbel, s_mask = gumbel_assign(s_pixel, self.tau, noise, generator)
        grouped = s_mask @ f_proj
        if self.normalize_groups:
            grouped = grouped / s_mask.sum(dim=-1, keepdim=True).clamp(min=1.0)
        tokens_next = self.norm(self.mlp(grouped) + t_proj)
        return GroupAssignment(s_pixel, s_gumbel, s_mask, h, w), tokens_next

    def zero_update(self) -> None:
        nn.init.zeros_(self.mlp[2].weight)
        nn.init.zeros_(self.mlp[2].bias)


class MaskGroupDecoder(nn.Module):
    def __init__(self, config: DecoderConfig, language_dim: int, visual_dim: int | None = None):
        super().__init__()
        self.config = config
        dim = config.token_width
        self.anomaly_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.background_token = nn.Parameter(torch.randn(config.background_tokens, dim) * 0.02)
        self.language_proj = nn.Linear(language_dim, dim)
        self.attention = nn.ModuleList(
            MaskedSelfAttention(dim, config.masked_attention, config.background_tokens) for _ in range(NUM_LAYERS)
        )
        self.groups = nn.ModuleList(
            GroupBlock(dim, visual_dim, config.gumbel_tau_init, config.tau_min, config.normalize_groups)
            for _ in range(NUM_LAYERS)
        )

    def initial_state(self, batch: int) -> QueryState:
        return QueryState(
            self.anomaly_token.expand(batch, -1), self.background_token.expand(batch, -1, -1), layer_index=0
        )

    def forward(
        self,
        fl: LanguageFeatures,
        pyramid: AggregatedPyramid,
        query_init: QueryState | None = None,
        noise: bool | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[QueryState, list[GroupAssignment]]:
        if noise is None:
            noise = self.training or self.config.inference_noise
        batch = fl.features.shape[0]
        state = query_init or self.initial_state(batch)
        tokens = torch.cat([state.anomaly_token[:, None], state.background_token], dim=1)
        language = self.language_proj(fl.features)
        pixels = [m.height * m.width for m in pyramid.maps]
        if any(a >= b for a, b in zip(pixels, pixels[1:])):
            raise ValueError("pyramid resolution must increase with layer index")
        assignments = []
        for k in range(NUM_LAYERS):
            tokens = self.attention[k](tokens, language, fl.valid_length)
            assignment, tokens = self.groups[k](tokens, pyramid[k].data, noise, generator)
            assignments.append(assignment)
        return QueryState(tokens[:, 0], tokens[:, 1:], layer_index=NUM_LAYERS), assignments


class MaskHead(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, anomaly_token: torch.Tensor, fa3: torch.Tensor, image_h: int, image_w: int) -> torch.Tensor:
        query = self.proj(anomaly_token)
        logits = torch.einsum("bc,bchw->bhw", query, fa3) / math.sqrt(self.dim)
        if logits.shape[-2:] != (image_h, image_w):
            logits = F.interpolate(logits[:, None], size=(image_h, image_w), mode="bilinear", align_corners=False)[:, 0]
        return logits


class NoAnomalyHead(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.linear = nn.Linear(dim, 2)

    def forward(self, background_token: torch.Tensor) -> torch.Tensor:
        if background_token.ndim == 3:
            background_token = background_token.mean(dim=1)
        return self.linear(background_token)


def infer_mask(prediction: PredictionOutput) -> tuple[np.ndarray, list[Label]]:
    """Binary masks (B, H, W) as uint8 and labels; a no-anomaly verdict empties the mask."""
    with torch.no_grad():
        labels = prediction.no_anomaly_logits.argmax(dim=-1)
        masks = (torch.sigmoid(prediction.mask_logits) > 0.5) & (labels == Label.ANOMALOUS)[:, None, None]
    return masks.to(torch.uint8).cpu().numpy(), [Label(int(v)) for v in labels.tolist()]
