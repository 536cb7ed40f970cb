"""Training configuration, ablation flags and the flat key-value config file format.

A config file holds one ``key = value`` pair per line; ``#`` starts a comment.
Keys are the names in :data:`CONFIG_KEYS`; anything else is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from .losses import LossWeights
from .lvle import LOCAL_AGGREGATION_MODES


class ConfigError(ValueError):
    pass


@dataclass
class AblationFlags:
    masked_attention: bool = True
    background_tokens: int = 1
    local_aggregation: str = "avgpool"

    def __post_init__(self):
        if self.background_tokens < 1:
            raise ConfigError("background_tokens must be >= 1")
        if self.local_aggregation not in LOCAL_AGGREGATION_MODES:
            raise ConfigError(f"local_aggregation must be one of {LOCAL_AGGREGATION_MODES}")

    @property
    def name(self) -> str:
        return (
            f"{'masked' if self.masked_attention else 'unmasked'}"
            f"-bg{self.background_tokens}-{self.local_aggregation}"
        )


@dataclass
class TrainConfig:
    epochs: int = 50
    steps: int | None = None  # overrides epochs when set
    batch_size: int = 16
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"
    seed: int = 0
    checkpoint_dir: str | None = None
    device: str = "cpu"
    token_width: int = 64
    max_len: int = 16
    log_every: int = 10
    gumbel_noise: bool = True
    grad_clip: float | None = None
    normalize_groups: bool = False
    ablation: AblationFlags = field(default_factory=AblationFlags)
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.token_width <= 0 or self.max_len <= 0:
            raise ConfigError("epochs, batch_size, token_width and max_len must be positive")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be 'constant' or 'cosine'")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-sized preset: batch 4, 300 steps.

        From-scratch training at this scale needs a higher learning rate than
        the pretrained-backbone default, clipping, and count-normalized groups
        to keep noise-free inference close to the noisy training forward.
        """
        preset = {"steps": 300, "batch_size": 4, "learning_rate": 5e-4, "grad_clip": 1.0, "normalize_groups": True}
        return cls(**{**preset, **overrides})


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _optional_str(text: str) -> str | None:
    return None if text.strip().lower() in ("", "none") else text.strip()


# key -> (section, parser); section None means a TrainConfig field.
CONFIG_KEYS: dict[str, tuple[str | None, Callable[[str], Any]]] = {
    "epochs": (None, int),
    "steps": (None, _optional_int),
    "batch_size": (None, int),
    "learning_rate": (None, float),
    "lr_schedule": (None, str),
    "seed": (None, int),
    "checkpoint_dir": (None, _optional_str),
    "device": (None, str),
    "token_width": (None, int),
    "max_len": (None, int),
    "log_every": (None, int),
    "gumbel_noise": (None, _bool),
    "grad_clip": (None, lambda t: None if t.strip().lower() in ("", "none") else float(t)),
    "normalize_groups": (None, _bool),
    "masked_attention": ("ablation", _bool),
    "background_tokens": ("ablation", int),
    "local_aggregation": ("ablation", str),
    "dice_weight": ("loss_weights", float),
    "focal_weight": ("loss_weights", float),
    "ce_weight": ("loss_weights", float),
    "intermediate_weight": ("loss_weights", float),
    "focal_gamma": ("loss_weights", float),
    "focal_alpha": ("loss_weights", float),
    "dice_eps": ("loss_weights", float),
}

_LOSS_FIELD = {"dice_weight": "dice", "focal_weight": "focal", "ce_weight": "ce", "intermediate_weight": "intermediate"}


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return coerce(values)


def coerce(values: dict[str, Any]) -> dict[str, Any]:
    out = {}
    for key, value in values.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        parser = CONFIG_KEYS[key][1]
        try:
            out[key] = parser(value) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def apply_overrides(config: TrainConfig, values: dict[str, Any]) -> TrainConfig:
    values = coerce(values)
    top, ablation, losses = {}, {}, {}
    for key, value in values.items():
        section = CONFIG_KEYS[key][0]
        if section is None:
            top[key] = value
        elif section == "ablation":
            ablation[key] = value
        else:
            losses[_LOSS_FIELD.get(key, key)] = value
    try:
        return replace(
            config,
            **top,
            ablation=replace(config.ablation, **ablation),
            loss_weights=replace(config.loss_weights, **losses),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def to_flat(config: TrainConfig) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, (section, _) in CONFIG_KEYS.items():
        if section is None:
            flat[key] = getattr(config, key)
        elif section == "ablation":
            flat[key] = getattr(config.ablation, key)
        else:
            flat[key] = getattr(config.loss_weights, _LOSS_FIELD.get(key, key))
    return flat


def format_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in to_flat(config).items())


def config_from_flat(flat: dict[str, Any]) -> TrainConfig:
    return apply_overrides(TrainConfig(), flat)

