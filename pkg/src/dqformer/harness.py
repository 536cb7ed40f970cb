"""Training loop, evaluation runner, single-image prediction and ablation sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import AblationFlags, TrainConfig, config_from_flat, to_flat
from .core import Label, Sample
from .data import load_image, render_overlay, write_prediction
from .decoder import DecoderConfig, infer_mask
from .losses import total_loss
from .lvle import LmaConfig
from .metrics import EvalReport, build_report, sample_iou
from .model import DQFormer, ModelConfig
from .text import Vocabulary, build_vocabulary, tokenize

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class Batch:
    ids: list[str]
    images: torch.Tensor  # (B, 3, H, W)
    tokens: torch.Tensor  # (B, L)
    valid_length: torch.Tensor  # (B,)
    masks: torch.Tensor  # (B, H, W)
    labels: torch.Tensor  # (B,)


def collate(samples: Sequence[Sample], vocab: Vocabulary, max_len: int, dtype=torch.float32) -> Batch:
    tokens, valid = zip(*(tokenize(s.expression, vocab, max_len) for s in samples))
    return Batch(
        ids=[s.id for s in samples],
        images=torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype).permute(0, 3, 1, 2).contiguous(),
        tokens=torch.as_tensor(np.stack(tokens)),
        valid_length=torch.as_tensor(valid, dtype=torch.long),
        masks=torch.as_tensor(np.stack([s.gt_mask for s in samples]), dtype=dtype),
        labels=torch.as_tensor([int(Label.parse(s.gt_label)) for s in samples], dtype=torch.long),
    )


def model_config_for(train: TrainConfig, vocab: Vocabulary) -> ModelConfig:
    flags = train.ablation
    return ModelConfig(
        vocab_size=vocab.size,
        max_len=train.max_len,
        lma=LmaConfig(local_aggregation=flags.local_aggregation),
        decoder=DecoderConfig(
            token_width=train.token_width,
            masked_attention=flags.masked_attention,
            background_tokens=flags.background_tokens,
            normalize_groups=train.normalize_groups,
        ),
    )


@dataclass
class Checkpoint:
    model: DQFormer
    vocab: Vocabulary
    config: TrainConfig
    log: list[dict] = field(default_factory=list)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        if path.suffix != ".pt":
            path = path / CHECKPOINT_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "model_config": self.model.config.to_dict(),
                "state_dict": self.model.state_dict(),
                "vocab": self.vocab.words(),
                "train_config": to_flat(self.config),
                "log": self.log,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if path.is_dir():
            path = path / CHECKPOINT_NAME
        payload = torch.load(path, map_location="cpu", weights_only=False)
        model = DQFormer(ModelConfig.from_dict(payload["model_config"]))
        model.load_state_dict(payload["state_dict"])
        model.eval()
        return cls(model, Vocabulary.from_words(payload["vocab"]), config_from_flat(payload["train_config"]),
                   payload.get("log", []))


def _learning_rate(config: TrainConfig, step: int, total: int) -> float:
    if config.lr_schedule == "cosine" and total > 0:
        return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * step / total))
    return config.learning_rate


def _batches(n: int, batch_size: int, generator: torch.Generator):
    while True:
        order = torch.randperm(n, generator=generator).tolist()
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def train(config: TrainConfig, dataset: Sequence[Sample], vocab: Vocabulary | None = None) -> Checkpoint:
    """Train a fresh model. Deterministic for a fixed seed in a single process."""
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    torch.manual_seed(config.seed)
    vocab = vocab or build_vocabulary([s.expression for s in dataset])
    model = DQFormer(model_config_for(config, vocab))
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    data_gen = torch.Generator().manual_seed(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed + 1)
    batch_size = min(config.batch_size, len(dataset))
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total = config.steps if config.steps is not None else config.epochs * steps_per_epoch

    training_log: list[dict] = []
    indices = _batches(len(dataset), batch_size, data_gen)
    for step in range(total):
        batch = collate([dataset[i] for i in next(indices)], vocab, config.max_len)
        pred = model(batch.images, batch.tokens, batch.valid_length, noise=config.gumbel_noise, generator=noise_gen)
        loss, terms = total_loss(pred, batch.masks, batch.labels, config.loss_weights)
        if not torch.isfinite(loss):
            _dump_nan(config, step, batch, terms)
            raise NumericError(f"non-finite loss at step {step} on batch {batch.ids}")
        lr = _learning_rate(config, step, total)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        training_log.append({"step": step, "loss": loss.item(), **{k: v.item() for k, v in terms.items()}})
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.5f", step, loss.item())

    model.eval()
    checkpoint = Checkpoint(model, vocab, config, training_log)
    if config.checkpoint_dir:
        out = Path(config.checkpoint_dir)
        checkpoint.save(out / CHECKPOINT_NAME)
        with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for row in training_log:
                fh.write(json.dumps(row) + "\n")
    return checkpoint


def _dump_nan(config: TrainConfig, step: int, batch: Batch, terms: dict) -> None:
    record = {"step": step, "batch_ids": batch.ids, "terms": {k: float(v) for k, v in terms.items()}}
    log.error("non-finite loss: %s", record)
    if config.checkpoint_dir:
        out = Path(config.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "nan_dump.json").write_text(json.dumps(record, indent=2), encoding="utf-8")


@torch.no_grad()
def predict_batch(model: DQFormer, vocab: Vocabulary, samples: Sequence[Sample], max_len: int,
                  batch_size: int = 16) -> tuple[np.ndarray, list[Label]]:
    model.eval()
    dtype = next(model.parameters()).dtype
    masks, labels = [], []
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start : start + batch_size], vocab, max_len, dtype)
        m, lab = infer_mask(model(batch.images, batch.tokens, batch.valid_length, noise=False))
        masks.append(m)
        labels.extend(lab)
    return np.concatenate(masks), labels


def evaluate(checkpoint: Checkpoint, dataset: Sequence[Sample], out_dir: str | Path | None = None) -> EvalReport:
    """Run deterministic inference, write predictions/overlays/report when ``out_dir`` is given."""
    masks, _ = predict_batch(checkpoint.model, checkpoint.vocab, dataset, checkpoint.config.max_len)
    report = build_report([sample_iou(m, s.gt_mask, s.id) for m, s in zip(masks, dataset)])
    if out_dir is not None:
        out = Path(out_dir)
        for mask, sample in zip(masks, dataset):
            write_prediction(sample.id, mask, out / "predictions")
            render_overlay(sample, mask, out / "overlays" / f"{sample.id}.png")
        report.save(out / "report.json")
    return report


def _pad_to_multiple(image: np.ndarray, multiple: int = 32) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = image.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return image, (ph, pw)


def predict_one(checkpoint: Checkpoint, image_path: str | Path, expression: str,
                out_dir: str | Path | None = None) -> dict:
    image = load_image(image_path)
    h, w = image.shape[:2]
    padded, (ph, pw) = _pad_to_multiple(image)
    sample = Sample(padded, expression, np.zeros(padded.shape[:2], dtype=np.uint8), Label.NO_ANOMALY, Path(image_path).stem)
    masks, labels = predict_batch(checkpoint.model, checkpoint.vocab, [sample], checkpoint.config.max_len)
    mask = masks[0][:h, :w]
    result = {
        "id": sample.id,
        "label": labels[0].slug,
        "mask_pixels": int(mask.sum()),
        "padding": [ph, pw],
        "mask": mask,
    }
    if out_dir is not None:
        out = Path(out_dir)
        result["mask_path"] = str(write_prediction(sample.id, mask, out))
        overlay = Sample(image, expression, np.zeros((h, w), dtype=np.uint8), Label.NO_ANOMALY, sample.id)
        result["overlay_path"] = str(render_overlay(overlay, mask, out / f"{sample.id}_overlay.png"))
    return result


def run_ablation(
    variants: Sequence[AblationFlags],
    train_set: Sequence[Sample],
    base: TrainConfig,
    eval_set: Sequence[Sample] | None = None,
    csv_path: str | Path | None = None,
) -> list[dict]:
    """Train each variant with the shared seed and schedule; one result row per variant."""
    eval_set = eval_set if eval_set is not None else train_set
    vocab = build_vocabulary([s.expression for s in train_set])
    rows = []
    for flags in variants:
        checkpoint = train(replace(base, ablation=flags, checkpoint_dir=None), train_set, vocab)
        report = evaluate(checkpoint, eval_set)
        rows.append(
            {
                "variant": flags.name,
                "masked_attention": flags.masked_attention,
                "background_tokens": flags.background_tokens,
                "local_aggregation": flags.local_aggregation,
                "miou": report.miou,
                "giou": report.giou,
            }
        )
    if csv_path is not None:
        path = Path(csv_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["variant"])
            writer.writeheader()
            writer.writerows(rows)
    return rows
