import json
import logging

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dqformer.metrics import (
    REPORT_SCHEMA,
    SampleEval,
    build_report,
    compute_giou,
    compute_miou,
    compute_oiou,
    evaluate_masks,
    n_acc_t_acc,
    precision_at_thresholds,
    sample_iou,
)


def ev(inter, union, no_anomaly=False, empty=False, id=""):
    return SampleEval(id, inter, union, inter / union if union else 1.0, no_anomaly, empty)


def random_pairs(n, seed, size=8):
    """Mixed pairs: about a third carry an all-zero GT, some predictions are blank."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        gt = rng.random((size, size)) < rng.uniform(0.05, 0.5)
        if rng.random() < 0.35:
            gt[:] = False
        pred = rng.random((size, size)) < rng.uniform(0.05, 0.5)
        if rng.random() < 0.3:
            pred[:] = False
        pairs.append((pred, gt))
    return pairs


class LoopOracle:
    """Metrics recomputed from scratch with per-pixel loops and plain Python arithmetic."""

    def __init__(self, pairs):
        self.rows = []
        for pred, gt in pairs:
            inter = union = 0
            gt_any = pred_any = False
            for y in range(pred.shape[0]):
                for x in range(pred.shape[1]):
                    p, g = bool(pred[y, x]), bool(gt[y, x])
                    inter += p and g
                    union += p or g
                    gt_any |= g
                    pred_any |= p
            self.rows.append((inter, union, not gt_any, not pred_any))

    def giou(self):
        total = 0.0
        for inter, union, no_anomaly, empty in self.rows:
            if no_anomaly:
                total += 1.0 if empty else 0.0
            else:
                total += inter / union
        return total / len(self.rows)

    def oiou(self):
        return sum(r[0] for r in self.rows) / sum(r[1] for r in self.rows)

    def pr(self, t):
        anomalous = [r[0] / r[1] for r in self.rows if not r[2]]
        return sum(1 for v in anomalous if v > t) / len(anomalous)

    def counts(self):
        tp = sum(1 for r in self.rows if r[2] and r[3])
        fn = sum(1 for r in self.rows if r[2] and not r[3])
        tn = sum(1 for r in self.rows if not r[2] and not r[3])
        fp = sum(1 for r in self.rows if not r[2] and r[3])
        return tp, fn, tn, fp


def test_sample_iou_identical():
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    assert sample_iou(m, m).iou == 1.0


def test_sample_iou_disjoint():
    a, b = np.zeros((4, 4), bool), np.zeros((4, 4), bool)
    a[0, :3] = True
    b[2, :4] = True
    b[3, 0] = True
    e = sample_iou(a, b)
    assert (e.iou, e.union, e.intersection) == (0.0, 8, 0)


def test_sample_iou_both_empty():
    e = sample_iou(np.zeros((3, 3)), np.zeros((3, 3)))
    assert e.iou == 1.0 and e.gt_is_no_anomaly and e.pred_is_empty


def test_sample_iou_shape_mismatch():
    with pytest.raises(ValueError):
        sample_iou(np.zeros((3, 3)), np.zeros((3, 4)))


def test_giou_examples():
    assert compute_giou([ev(0, 0, True, True), ev(2, 4)]) == 0.75
    assert compute_giou([ev(3, 3), ev(0, 0, True, True)]) == 1.0
    assert compute_giou([ev(0, 5, True, False)]) == 0.0


def test_giou_empty_rejected():
    with pytest.raises(ValueError):
        compute_giou([])


def test_oiou_examples():
    assert compute_oiou([ev(2, 4)]) == 0.5
    evals = [ev(3, 4), ev(0, 2)]
    assert compute_oiou(evals) == 0.5
    assert compute_giou(evals) == 0.375
    assert compute_oiou([ev(4, 4), ev(7, 7)]) == 1.0


def test_oiou_zero_union(caplog):
    with caplog.at_level(logging.WARNING):
        assert compute_oiou([ev(0, 0, True, True)]) == 1.0
    assert "union" in caplog.text


def test_precision_examples():
    pr = precision_at_thresholds([ev(55, 100), ev(95, 100)])
    assert pr[0.5] == 1.0 and pr[0.9] == 0.5
    assert precision_at_thresholds([ev(1, 2)])[0.5] == 0.0


def test_precision_needs_anomalous():
    with pytest.raises(ValueError):
        precision_at_thresholds([ev(0, 0, True, True)])


def test_nacc_tacc_examples():
    evals = [ev(0, 0, True, True)] * 3 + [ev(0, 2, True, False)]
    n_acc, t_acc, counts = n_acc_t_acc(evals)
    assert n_acc == 0.75 and t_acc is None
    assert (counts.tp, counts.fn) == (3, 1)
    n_acc, t_acc, _ = n_acc_t_acc([ev(1, 2), ev(3, 3)])
    assert n_acc is None and t_acc == 1.0


def test_miou_over_anomalous_only():
    assert compute_miou([ev(1, 2), ev(0, 0, True, True), ev(0, 3, True, False)]) == 0.5
    assert compute_miou([ev(0, 0, True, True)]) is None


def test_oracle_equivalence_200_pairs():
    pairs = random_pairs(200, seed=0)
    report = evaluate_masks([p for p, _ in pairs], [g for _, g in pairs])
    oracle = LoopOracle(pairs)
    for row, e in zip(oracle.rows, report.per_sample):
        assert (e.intersection, e.union, e.gt_is_no_anomaly, e.pred_is_empty) == row
    c = report.counts
    assert (c.tp, c.fn, c.tn, c.fp) == oracle.counts()
    assert report.giou == pytest.approx(oracle.giou(), abs=1e-12)
    assert report.oiou == pytest.approx(oracle.oiou(), abs=1e-12)
    for t in (0.5, 0.6, 0.7, 0.8, 0.9):
        assert report.pr[t] == pytest.approx(oracle.pr(t), abs=1e-12)
    tp, fn, tn, fp = oracle.counts()
    assert report.n_acc == pytest.approx(tp / (tp + fn), abs=1e-12)
    assert report.t_acc == pytest.approx(tn / (tn + fp), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12), st.randoms())
def test_metric_properties(seed, n, rnd):
    pairs = random_pairs(n, seed, size=4)
    evals = [sample_iou(p, g) for p, g in pairs]
    giou = compute_giou(evals)
    assert 0 <= giou <= 1
    assert 0 <= compute_oiou(evals) <= 1
    shuffled = list(evals)
    rnd.shuffle(shuffled)
    assert compute_giou(shuffled) == pytest.approx(giou, abs=1e-12)
    n_acc, t_acc, _ = n_acc_t_acc(evals)
    perfect = ev(3, 3) if rnd.random() < 0.5 else ev(0, 0, True, True)
    n2, t2, _ = n_acc_t_acc(evals + [perfect])
    assert compute_giou(evals + [perfect]) >= giou - 1e-12
    if n_acc is not None and n2 is not None:
        assert n2 >= n_acc
    if t_acc is not None and t2 is not None:
        assert t2 >= t_acc
    if any(not e.gt_is_no_anomaly for e in evals):
        values = list(precision_at_thresholds(evals).values())
        assert values == sorted(values, reverse=True)


def test_report_json_schema():
    pairs = random_pairs(20, seed=3)
    report = evaluate_masks([p for p, _ in pairs], [g for _, g in pairs])
    data = json.loads(report.to_json())
    jsonschema.validate(data, REPORT_SCHEMA)
    assert data["pr50"] == report.pr[0.5]


def test_report_absent_rates_are_null():
    report = build_report([ev(0, 0, True, True)])
    data = json.loads(report.to_json())
    jsonschema.validate(data, REPORT_SCHEMA)
    assert data["t_acc"] is None and data["miou"] is None and data["pr70"] is None
