"""Synthetic referring-anomaly dataset generator, dataset IO and prediction rendering.

Layout on disk::

    root/{split}/images/{id}.png     RGB, 8 bit
    root/{split}/masks/{id}.png      single channel, 0 = background, 255 = anomaly
    root/{split}/manifest.jsonl      {"id", "expression", "label"} per line
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core import Label, Sample, validate_sample

ANOMALY_TYPES = ("spot", "scratch", "hole", "crack")
COLORS = {
    "red": (0.86, 0.10, 0.10),
    "green": (0.10, 0.74, 0.18),
    "blue": (0.14, 0.26, 0.92),
    "white": (0.97, 0.97, 0.97),
    "black": (0.03, 0.03, 0.03),
}
# Row-major 3x3 grid of equal thirds.
REGIONS = (
    ("top left", "top", "top right"),
    ("left", "center", "right"),
    ("bottom left", "bottom", "bottom right"),
)
SPLITS = ("train", "val", "test")

UNIVERSAL = "universal"
ATTRIBUTE = "attribute"
SPATIAL = "spatial"
ABSENT = "absent"


class DatasetError(Exception):
    """Raised for missing files, corrupt images and invalid samples."""


@dataclass
class GeneratorConfig:
    num_samples: int = 16
    image_size: int = 64
    anomaly_types: tuple[str, ...] = ANOMALY_TYPES
    colors: tuple[str, ...] = tuple(COLORS)
    no_anomaly_fraction: float = 0.25
    universal_prompt_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        self.anomaly_types = tuple(self.anomaly_types)
        self.colors = tuple(self.colors)
        if not self.anomaly_types:
            raise ValueError("at least one anomaly type is required")
        if not self.colors:
            raise ValueError("at least one color is required")
        if unknown := set(self.anomaly_types) - set(ANOMALY_TYPES):
            raise ValueError(f"unknown anomaly types {sorted(unknown)}")
        if unknown := set(self.colors) - set(COLORS):
            raise ValueError(f"unknown colors {sorted(unknown)}")
        if self.image_size <= 0 or self.image_size % 32:
            raise ValueError("image_size must be a positive multiple of 32")
        if self.num_samples < 0:
            raise ValueError("num_samples must be non-negative")
        for name in ("no_anomaly_fraction", "universal_prompt_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.no_anomaly_fraction + self.universal_prompt_fraction > 1.0:
            raise ValueError("special-sample fractions sum to more than 1")


@dataclass
class Anomaly:
    kind: str
    color: str
    raster: np.ndarray  # H x W bool
    region: str

    @property
    def centroid(self) -> tuple[float, float]:
        ys, xs = np.nonzero(self.raster)
        return float(ys.mean()), float(xs.mean())


@dataclass
class GeneratedSample:
    sample: Sample
    anomalies: list[Anomaly]
    referents: list[int]
    template: str


@dataclass
class ManifestEntry:
    id: str
    image_path: Path
    mask_path: Path
    expression: str
    label: Label


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)


def region_of(y: float, x: float, height: int, width: int) -> str:
    row = min(int(3 * y / height), 2)
    col = min(int(3 * x / width), 2)
    return REGIONS[row][col]


def template_words(config: GeneratorConfig | None = None) -> set[str]:
    """Every word any template can emit for ``config``."""
    config = config or GeneratorConfig()
    words = {"the", "anomaly", "on", "of", "object"}
    words.update(config.anomaly_types)
    words.update(config.colors)
    for row in REGIONS:
        for name in row:
            words.update(name.split())
    return words


# --- rasterisation -----------------------------------------------------------


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size]
    return ys + 0.5, xs + 0.5


def _segment_distance(ys, xs, p0, p1) -> np.ndarray:
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    length_sq = dy * dy + dx * dx
    t = np.clip(((ys - y0) * dy + (xs - x0) * dx) / length_sq, 0.0, 1.0)
    return np.hypot(ys - (y0 + t * dy), xs - (x0 + t * dx))


def rasterize(kind: str, center: tuple[float, float], angle: float, scale: float, size: int,
              rng: np.random.Generator) -> np.ndarray:
    ys, xs = _grid(size)
    cy, cx = center
    if kind == "spot":
        radius = rng.uniform(3.5, 6.0) * scale
        return np.hypot(ys - cy, xs - cx) <= radius
    if kind == "hole":
        outer = rng.uniform(5.5, 7.5) * scale
        d = np.hypot(ys - cy, xs - cx)
        return (d <= outer) & (d >= outer - 3.5 * scale)
    direction = np.array([np.sin(angle), np.cos(angle)])
    if kind == "scratch":
        half = rng.uniform(7.0, 11.0) * scale
        p0, p1 = np.array(center) - half * direction, np.array(center) + half * direction
        return _segment_distance(ys, xs, p0, p1) <= 2.0 * scale
    if kind == "crack":
        normal = np.array([-direction[1], direction[0]])
        step = rng.uniform(4.0, 5.5) * scale
        offsets = (-1.5, -0.5, 0.5, 1.5)
        points = [np.array(center) + o * step * direction + (1 if i % 2 else -1) * 2.5 * scale * normal
                  for i, o in enumerate(offsets)]
        out = np.zeros((size, size), dtype=bool)
        for a, b in zip(points, points[1:]):
            out |= _segment_distance(ys, xs, a, b) <= 1.7 * scale
        return out
    raise ValueError(f"unknown anomaly type {kind!r}")


def _dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def _background(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = _grid(size)
    freq = rng.uniform(0.15, 0.4)
    phase = rng.uniform(0, 2 * np.pi)
    base = 0.28 + 0.04 * np.sin(freq * (xs + 0.5 * ys) + phase)
    image = np.repeat(base[..., None], 3, axis=2) + rng.normal(0, 0.015, (size, size, 3))
    cy, cx = size / 2 + rng.uniform(-2, 2), size / 2 + rng.uniform(-2, 2)
    ry, rx = size * rng.uniform(0.42, 0.47), size * rng.uniform(0.42, 0.47)
    obj = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    tint = np.array([0.58, 0.54, 0.48]) + rng.uniform(-0.04, 0.04, 3)
    texture = 0.03 * np.sin(0.9 * ys + rng.uniform(0, 6)) * np.cos(0.7 * xs)
    image[obj] = tint + texture[obj, None] + rng.normal(0, 0.01, (int(obj.sum()), 3))
    return image, obj


def _place(kinds_colors, obj, size, rng, max_tries=200) -> list[Anomaly]:
    scale = size / 64.0
    placed: list[Anomaly] = []
    occupied = np.zeros((size, size), dtype=bool)
    inner = obj.copy()
    for kind, color in kinds_colors:
        for _ in range(max_tries):
            cy, cx = rng.uniform(0.15 * size, 0.85 * size, 2)
            raster = rasterize(kind, (cy, cx), rng.uniform(0, np.pi), scale, size, rng)
            if not raster.any() or (raster & ~inner).any() or (raster & occupied).any():
                continue
            ys, xs = np.nonzero(raster)
            region = region_of(ys.mean() + 0.5, xs.mean() + 0.5, size, size)
            if any(a.kind == kind and a.color == color and a.region == region for a in placed):
                continue
            placed.append(Anomaly(kind, color, raster, region))
            occupied |= _dilate(raster, 2)
            break
    return placed


def _paint(image: np.ndarray, anomalies: Sequence[Anomaly], rng: np.random.Generator) -> np.ndarray:
    for a in anomalies:
        rgb = np.array(COLORS[a.color]) + rng.normal(0, 0.02, (int(a.raster.sum()), 3))
        image[a.raster] = rgb
    return np.clip(image, 0.0, 1.0)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(image * 255.0).astype(np.uint8)


def generate_sample(config: GeneratorConfig, index: int, no_anomaly: bool, universal: bool,
                    split: str = "train") -> GeneratedSample:
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    types, colors = list(config.anomaly_types), list(config.colors)
    image, obj = _background(size, rng)

    if no_anomaly:
        absent = types[rng.integers(len(types))]
        others = [t for t in types if t != absent]
        count = int(rng.integers(0, 3)) if others else 0
        specs = [(others[rng.integers(len(others))], colors[rng.integers(len(colors))]) for _ in range(count)]
        anomalies = _place(specs, obj, size, rng)
        if rng.random() < 0.5:
            expression = f"the {absent}"
        else:
            expression = f"the {colors[rng.integers(len(colors))]} {absent}"
        referents, template = [], ABSENT
    else:
        count = int(rng.integers(1, 4))
        specs = [(types[rng.integers(len(types))], colors[rng.integers(len(colors))]) for _ in range(count)]
        anomalies = []
        while not anomalies:
            anomalies = _place(specs, obj, size, rng)
        target = anomalies[int(rng.integers(len(anomalies)))]
        if universal:
            expression, template = "the anomaly", UNIVERSAL
            referents = list(range(len(anomalies)))
        elif rng.random() < 0.5:
            expression, template = f"the {target.color} {target.kind}", ATTRIBUTE
            referents = [i for i, a in enumerate(anomalies) if a.kind == target.kind and a.color == target.color]
        else:
            expression, template = f"the {target.kind} on the {target.region} of the object", SPATIAL
            referents = [i for i, a in enumerate(anomalies) if a.kind == target.kind and a.region == target.region]

    image = _quantize(_paint(image, anomalies, rng)).astype(np.float32) / 255.0
    mask = np.zeros((size, size), dtype=np.uint8)
    for i in referents:
        mask[anomalies[i].raster] = 1
    label = Label.ANOMALOUS if referents else Label.NO_ANOMALY
    sample = Sample(image, expression, mask, label, id=f"{split}_{index:05d}")
    return GeneratedSample(sample, anomalies, referents, template)


def sample_roles(config: GeneratorConfig) -> tuple[set[int], set[int]]:
    """Indices of no-anomaly samples and of universal-prompt samples."""
    n = config.num_samples
    order = np.random.default_rng(config.seed).permutation(n)
    n_absent = int(round(config.no_anomaly_fraction * n))
    n_universal = min(int(round(config.universal_prompt_fraction * n)), n - n_absent)
    return set(order[:n_absent].tolist()), set(order[n_absent : n_absent + n_universal].tolist())


def generate_samples(config: GeneratorConfig, split: str = "train") -> list[GeneratedSample]:
    absent, universal = sample_roles(config)
    return [generate_sample(config, i, i in absent, i in universal, split) for i in range(config.num_samples)]


# --- IO ----------------------------------------------------------------------


def _save_png(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def save_image(image: np.ndarray, path: str | Path) -> None:
    _save_png(_quantize(np.asarray(image)), Path(path))


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    _save_png((np.asarray(mask) > 0).astype(np.uint8) * 255, Path(path))


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing image file: {path}")
    try:
        with Image.open(path) as im:
            array = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"corrupt image {path}: {exc}") from exc
    return array.astype(np.float32) / 255.0


def load_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing mask file: {path}")
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "1", "P"):
                raise DatasetError(f"mask {path} is not single-channel (mode {im.mode})")
            array = np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"corrupt mask {path}: {exc}") from exc
    if not np.isin(array, (0, 255)).all():
        raise DatasetError(f"non-binary mask: {path}")
    return (array == 255).astype(np.uint8)


def write_dataset(samples: Sequence[Sample], root: str | Path, split: str) -> DatasetManifest:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    base = Path(root) / split
    manifest = DatasetManifest(split)
    lines = []
    for s in samples:
        image_path, mask_path = base / "images" / f"{s.id}.png", base / "masks" / f"{s.id}.png"
        save_image(s.image, image_path)
        save_mask(s.gt_mask, mask_path)
        label = Label.parse(s.gt_label)
        lines.append(json.dumps({"id": s.id, "expression": s.expression, "label": label.slug}))
        manifest.entries.append(ManifestEntry(s.id, image_path, mask_path, s.expression, label))
    base.mkdir(parents=True, exist_ok=True)
    (base / "manifest.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest


def generate_dataset(config: GeneratorConfig, root: str | Path, split: str = "train") -> DatasetManifest:
    return write_dataset([g.sample for g in generate_samples(config, split)], root, split)


def read_manifest(root: str | Path, split: str) -> DatasetManifest:
    base = Path(root) / split
    path = base / "manifest.jsonl"
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path}")
    manifest = DatasetManifest(split)
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            entry = ManifestEntry(
                record["id"],
                base / "images" / f"{record['id']}.png",
                base / "masks" / f"{record['id']}.png",
                record["expression"],
                Label.parse(record["label"]),
            )
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DatasetError(f"bad manifest line {n} in {path}: {exc}") from exc
        manifest.entries.append(entry)
    return manifest


def load_dataset(root: str | Path, split: str) -> list[Sample]:
    samples = []
    for entry in read_manifest(root, split).entries:
        sample = Sample(load_image(entry.image_path), entry.expression, load_mask(entry.mask_path), entry.label, entry.id)
        if problems := validate_sample(sample):
            raise DatasetError(f"invalid sample {entry.id}: {'; '.join(problems)}")
        samples.append(sample)
    return samples


def write_prediction(id: str, mask: np.ndarray, out_dir: str | Path) -> Path:
    path = Path(out_dir) / f"{id}.png"
    save_mask(mask, path)
    return path


def load_prediction(id: str, pred_dir: str | Path) -> np.ndarray:
    return load_mask(Path(pred_dir) / f"{id}.png")


OVERLAY_ALPHA = 0.5
OVERLAY_RED = np.array([255.0, 0.0, 0.0])
CONTOUR_GREEN = np.array([0, 255, 0], dtype=np.uint8)


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (image border counts as outside)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def overlay_array(image: np.ndarray, pred_mask: np.ndarray, gt_mask: np.ndarray | None = None) -> np.ndarray:
    out = _quantize(np.asarray(image)).astype(np.float64)
    sel = np.asarray(pred_mask).astype(bool)
    out[sel] = (1.0 - OVERLAY_ALPHA) * out[sel] + OVERLAY_ALPHA * OVERLAY_RED
    out = np.round(out).astype(np.uint8)
    if gt_mask is not None:
        out[mask_contour(gt_mask)] = CONTOUR_GREEN
    return out


def render_overlay(sample: Sample, mask: np.ndarray, out_path: str | Path) -> Path:
    path = Path(out_path)
    _save_png(overlay_array(sample.image, mask, sample.gt_mask), path)
    return path
