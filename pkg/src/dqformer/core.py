"""Domain types shared across the package, plus sample validation and mask resampling."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

STRIDE_MULTIPLE = 32


class Label(enum.IntEnum):
    """No-anomaly identifier classes. Index 0 is always "no anomaly"."""

    NO_ANOMALY = 0
    ANOMALOUS = 1

    @classmethod
    def parse(cls, value: str | int | "Label") -> "Label":
        if isinstance(value, Label):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().upper()
        if key not in cls.__members__:
            raise ValueError(f"unknown label {value!r}")
        return cls[key]

    @property
    def slug(self) -> str:
        return self.name.lower()


class FeatureKind(enum.Enum):
    RAW_VISUAL = "raw_visual"
    FUSED_VL = "fused_vl"
    AGGREGATED = "aggregated"


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3, float in [0, 1]
    expression: str
    gt_mask: np.ndarray  # H x W, {0, 1}
    gt_label: Label
    id: str = ""


@dataclass
class FeatureMap:
    """A batch of feature maps, channels-first: ``data`` is (B, C, h, w)."""

    data: torch.Tensor
    stage: int
    kind: FeatureKind

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    @property
    def channels(self) -> int:
        return self.data.shape[-3]


@dataclass
class QueryState:
    """Anomaly and background tokens, batched as (B, C_t) / (B, n_bg, C_t)."""

    anomaly_token: torch.Tensor
    background_token: torch.Tensor
    layer_index: int = 0

    def __post_init__(self):
        if not 0 <= self.layer_index <= 3:
            raise ValueError(f"layer_index must be in 0..3, got {self.layer_index}")


@dataclass
class GroupAssignment:
    """Pixel-to-token assignment of one group block, each (B, n_tokens, h*w)."""

    s_pixel: torch.Tensor
    s_gumbel: torch.Tensor
    s_mask: torch.Tensor
    height: int
    width: int

    def anomaly_soft_map(self) -> torch.Tensor:
        return self.s_gumbel[:, 0].reshape(-1, self.height, self.width)


@dataclass
class PredictionOutput:
    mask_logits: torch.Tensor  # (B, H, W)
    no_anomaly_logits: torch.Tensor  # (B, 2); column 0 = no anomaly
    intermediate_soft_masks: list[torch.Tensor] = field(default_factory=list)
    assignments: list[GroupAssignment] = field(default_factory=list)


def validate_sample(sample: Sample) -> list[str]:
    """Return the list of invariant violations for ``sample``; empty means valid."""
    problems: list[str] = []
    image = np.asarray(sample.image)
    mask = np.asarray(sample.gt_mask)
    if image.ndim != 3 or image.shape[-1] != 3:
        problems.append(f"image: expected H x W x 3, got shape {image.shape}")
        return problems
    h, w = image.shape[:2]
    if h % STRIDE_MULTIPLE:
        problems.append("H not multiple of 32")
    if w % STRIDE_MULTIPLE:
        problems.append("W not multiple of 32")
    if not np.all(np.isfinite(image)) or image.min(initial=0.0) < 0.0 or image.max(initial=0.0) > 1.0:
        problems.append("image: values outside [0, 1]")
    if mask.shape != (h, w):
        problems.append(f"gtMask: shape {mask.shape} does not match image {(h, w)}")
        return problems
    if not np.isin(mask, (0, 1)).all():
        problems.append("gtMask: non-binary values")
    try:
        label = Label.parse(sample.gt_label)
    except ValueError:
        problems.append(f"gtLabel: unknown value {sample.gt_label!r}")
        return problems
    if (label == Label.NO_ANOMALY) != (not mask.any()):
        problems.append("gtLabel/gtMask mismatch")
    return problems


def resample_mask_to_grid(mask: np.ndarray | torch.Tensor, target_h: int, target_w: int):
    """Area-average a binary mask down to ``target_h x target_w``.

    Accepts a single (H, W) mask or a batch (..., H, W); returns the same
    container type it was given.
    """
    h, w = mask.shape[-2:]
    if target_h <= 0 or target_w <= 0 or target_h > h or target_w > w:
        raise ValueError(f"cannot resample {h}x{w} mask to {target_h}x{target_w}")
    if h % target_h or w % target_w:
        raise ValueError(f"target {target_h}x{target_w} does not evenly divide mask {h}x{w}")
    bh, bw = h // target_h, w // target_w
    lead = mask.shape[:-2]
    if isinstance(mask, torch.Tensor):
        blocks = mask.to(torch.get_default_dtype() if not mask.is_floating_point() else mask.dtype)
        return blocks.reshape(*lead, target_h, bh, target_w, bw).mean(dim=(-3, -1))
    blocks = np.asarray(mask, dtype=np.float64).reshape(*lead, target_h, bh, target_w, bw)
    return blocks.mean(axis=(-3, -1))
