"""GRES-style evaluation: per-sample IoU, gIoU, oIoU, Pr@X, N-acc and T-acc."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PR_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class SampleEval:
    id: str
    intersection: int
    union: int
    iou: float
    gt_is_no_anomaly: bool
    pred_is_empty: bool


@dataclass
class ConfusionCounts:
    tp: int = 0  # no-anomaly GT, empty prediction
    fn: int = 0  # no-anomaly GT, non-empty prediction
    tn: int = 0  # anomalous GT, non-empty prediction
    fp: int = 0  # anomalous GT, empty prediction


@dataclass
class EvalReport:
    giou: float
    oiou: float
    miou: float | None
    pr: dict[float, float]
    n_acc: float | None
    t_acc: float | None
    counts: ConfusionCounts
    per_sample: list[SampleEval] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"giou": self.giou, "oiou": self.oiou, "miou": self.miou}
        for t in PR_THRESHOLDS:
            out[f"pr{round(t * 100)}"] = self.pr.get(t)
        out["n_acc"] = self.n_acc
        out["t_acc"] = self.t_acc
        out["counts"] = asdict(self.counts)
        out["per_sample"] = [asdict(s) for s in self.per_sample]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


REPORT_SCHEMA = {
    "type": "object",
    "required": ["giou", "oiou", "miou", "pr50", "pr60", "pr70", "pr80", "pr90", "n_acc", "t_acc", "counts", "per_sample"],
    "properties": {
        **{k: {"type": ["number", "null"], "minimum": 0, "maximum": 1}
           for k in ("giou", "oiou", "miou", "pr50", "pr60", "pr70", "pr80", "pr90", "n_acc", "t_acc")},
        "counts": {
            "type": "object",
            "required": ["tp", "fn", "tn", "fp"],
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("tp", "fn", "tn", "fp")},
        },
        "per_sample": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "intersection", "union", "iou", "gt_is_no_anomaly", "pred_is_empty"],
            },
        },
    },
}


def sample_iou(pred: np.ndarray, gt: np.ndarray, id: str = "") -> SampleEval:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    inter = int(np.count_nonzero(pred & gt))
    union = int(np.count_nonzero(pred | gt))
    iou = inter / union if union else 1.0
    return SampleEval(id, inter, union, iou, not gt.any(), not pred.any())


def credited_iou(e: SampleEval) -> float:
    """IoU with the no-target crediting rule: 1 for a correct empty, 0 otherwise."""
    if e.gt_is_no_anomaly:
        return 1.0 if e.pred_is_empty else 0.0
    return e.iou


def compute_giou(evals: Sequence[SampleEval]) -> float:
    if not evals:
        raise ValueError("gIoU of an empty evaluation list")
    return float(np.mean([credited_iou(e) for e in evals]))


def compute_oiou(evals: Sequence[SampleEval]) -> float:
    total_inter = sum(e.intersection for e in evals)
    total_union = sum(e.union for e in evals)
    if total_union == 0:
        log.warning("total union is zero; oIoU defined as 1")
        return 1.0
    return total_inter / total_union


def compute_miou(evals: Sequence[SampleEval]) -> float | None:
    ious = [e.iou for e in evals if not e.gt_is_no_anomaly]
    return float(np.mean(ious)) if ious else None


def precision_at_thresholds(evals: Sequence[SampleEval], thresholds: Iterable[float] = PR_THRESHOLDS) -> dict[float, float]:
    ious = np.array([e.iou for e in evals if not e.gt_is_no_anomaly], dtype=np.float64)
    if ious.size == 0:
        raise ValueError("precision@X needs at least one anomalous sample")
    return {float(t): float(np.count_nonzero(ious > t) / ious.size) for t in thresholds}


def n_acc_t_acc(evals: Sequence[SampleEval]) -> tuple[float | None, float | None, ConfusionCounts]:
    c = ConfusionCounts()
    for e in evals:
        if e.gt_is_no_anomaly:
            if e.pred_is_empty:
                c.tp += 1
            else:
                c.fn += 1
        elif e.pred_is_empty:
            c.fp += 1
        else:
            c.tn += 1
    n_acc = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    t_acc = c.tn / (c.tn + c.fp) if c.tn + c.fp else None
    return n_acc, t_acc, c


def build_report(evals: Sequence[SampleEval]) -> EvalReport:
    evals = list(evals)
    n_acc, t_acc, counts = n_acc_t_acc(evals)
    has_anomalous = any(not e.gt_is_no_anomaly for e in evals)
    return EvalReport(
        giou=compute_giou(evals),
        oiou=compute_oiou(evals),
        miou=compute_miou(evals),
        pr=precision_at_thresholds(evals) if has_anomalous else {},
        n_acc=n_acc,
        t_acc=t_acc,
        counts=counts,
        per_sample=evals,
    )


def evaluate_masks(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], ids: Sequence[str] | None = None) -> EvalReport:
    ids = ids or [str(i) for i in range(len(gts))]
    return build_report([sample_iou(p, g, i) for p, g, i in zip(preds, gts, ids, strict=True)])
