import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from colonformer.metrics import (
    METRIC_KEYS, ConfusionCounts, Curves, MetricsReport, aggregate, binarize, dice_iou, image_metrics, mean_std,
    recall_precision, sweep_curves,
)

masks = arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def test_binarize_boundary_convention():
    p = np.array([0.0, 0.3, 0.5, 0.9, 1.0])
    assert binarize(p).tolist() == [False, False, True, True, True]
    assert binarize(p, 0.0).all()
    assert not binarize(p, 1 + 1e-9).any()


def test_confusion_counts_total():
    rng = np.random.default_rng(0)
    a, b = rng.random((7, 9)) < 0.5, rng.random((7, 9)) < 0.3
    assert ConfusionCounts.from_masks(a, b).total == 63


def test_dice_iou_examples():
    g = np.zeros((3, 3), bool)
    assert dice_iou(g | np.eye(3, dtype=bool), np.eye(3, dtype=bool)) == pytest.approx((1, 1))
    g = np.array([[1, 1, 0, 0]], bool)
    disjoint = np.array([[0, 0, 1, 1]], bool)
    dice, iou = dice_iou(disjoint, g)
    assert dice < 1e-8 and iou < 1e-8
    dice, iou = dice_iou(np.array([[1, 0, 0, 0]], bool), g)
    assert dice == pytest.approx(2 / 3, rel=1e-8) and iou == pytest.approx(1 / 2, rel=1e-8)


def test_recall_precision_examples():
    g = np.array([1, 1, 1, 1, 0, 0, 0], bool)
    pred = np.array([1, 1, 1, 0, 1, 1, 0], bool)  # tp 3, fn 1, fp 2
    assert recall_precision(pred, g) == pytest.approx((0.75, 0.6), rel=1e-8)
    assert recall_precision(g, g) == pytest.approx((1, 1))
    r, p = recall_precision(np.ones(7, bool), g)
    assert r == pytest.approx(1) and p < 1


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        dice_iou(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError, match="shape"):
        recall_precision(np.ones((2, 2)), np.ones((3, 2)))


@settings(max_examples=60, deadline=None)
@given(masks, st.data())
def test_dice_iou_identity(g, data):
    pred = data.draw(arrays(np.bool_, g.shape))
    dice, iou = dice_iou(pred, g, eps=0.0) if (pred | g).any() else (1.0, 1.0)
    assert dice == pytest.approx(2 * iou / (1 + iou), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(masks, st.data(), st.integers(0, 3))
def test_invariant_under_flips_and_rotations(g, data, k):
    pred = data.draw(arrays(np.bool_, g.shape))
    base = image_metrics(pred, g)
    assert image_metrics(np.rot90(pred, k), np.rot90(g, k)) == base
    assert image_metrics(pred[::-1], g[::-1]) == base


def test_aggregate_is_per_image_mean():
    rng = np.random.default_rng(1)
    per = []
    for _ in range(9):
        g = rng.random((rng.integers(4, 30), rng.integers(4, 30))) < 0.3
        per.append(image_metrics(rng.random(g.shape) < 0.4, g))
    agg = aggregate(per)
    assert list(agg) == list(METRIC_KEYS)
    assert abs(agg["mDice"] - sum(m["dice"] for m in per) / 9) < 1e-12
    with pytest.raises(ValueError):
        aggregate([])


def test_mean_std():
    assert mean_std([0.9] * 5) == pytest.approx((0.9, 0.0), abs=1e-15)
    mean, std = mean_std([1.0, 2.0, 3.0])
    assert (mean, std) == pytest.approx((2.0, 1.0))
    assert mean_std([0.5]) == (0.5, 0.0)


def test_perfect_scorer_roc_hits_corner():
    rng = np.random.default_rng(2)
    g = rng.random((40, 40)) < 0.5
    curves = sweep_curves([g.astype(float) * 0.8 + 0.1], [g])
    assert any(f == 0 and t == 1 for f, t in zip(curves.fpr, curves.tpr))
    assert curves.roc_auc() == pytest.approx(1.0)


def test_random_scores_auc_near_half():
    rng = np.random.default_rng(3)
    g = rng.random(10_000) < 0.5
    p = rng.random(10_000)
    assert abs(sweep_curves([p], [g]).roc_auc() - 0.5) < 0.05


def test_threshold_endpoints():
    rng = np.random.default_rng(4)
    g = rng.random((10, 10)) < 0.5
    p = rng.random((10, 10)) * 0.99
    c = sweep_curves([p], [g], [0.0, 1.0])
    assert (c.fpr[0], c.tpr[0]) == (1.0, 1.0)
    assert (c.fpr[1], c.tpr[1]) == (0.0, 0.0)
    assert c.precision[1] == 1.0


def test_curves_monotone_and_pooled():
    rng = np.random.default_rng(5)
    probs = [rng.random((8, 8)), rng.random((5, 11))]
    gts = [rng.random((8, 8)) < 0.4, rng.random((5, 11)) < 0.6]
    c = sweep_curves(probs, gts)
    assert np.all(np.diff(c.tpr) <= 0) and np.all(np.diff(c.fpr) <= 0)
    # pooled counts at one threshold, by direct counting
    t = c.thresholds[100]
    p_all = np.concatenate([p.ravel() for p in probs])
    g_all = np.concatenate([g.ravel() for g in gts])
    tp = np.sum((p_all >= t) & g_all)
    assert c.tpr[100] == pytest.approx(tp / g_all.sum())
    assert c.precision[100] == pytest.approx(tp / np.sum(p_all >= t))


def test_sweep_errors():
    with pytest.raises(ValueError, match="empty"):
        sweep_curves([], [])
    with pytest.raises(ValueError, match="sorted"):
        sweep_curves([np.zeros(3)], [np.zeros(3, bool)], [0.6, 0.2])


def test_curves_csv_and_mean(tmp_path):
    rng = np.random.default_rng(6)
    g = rng.random(200) < 0.5
    a, b = sweep_curves([rng.random(200)], [g]), sweep_curves([rng.random(200)], [g])
    m = Curves.mean([a, b])
    np.testing.assert_allclose(m.tpr, (a.tpr + b.tpr) / 2)
    m.write_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr,recall,precision"
    assert len(lines) == 257
    with pytest.raises(ValueError):
        Curves.mean([a, sweep_curves([rng.random(200)], [g], [0.0, 1.0])])


def test_report_text_fixed_order():
    per = [image_metrics(np.eye(3, dtype=bool), np.eye(3, dtype=bool)),
           image_metrics(np.ones((3, 3), bool), np.eye(3, dtype=bool))]
    report = MetricsReport(["b", "a"], per)
    doc = json.loads(report.to_text())
    assert list(doc) == ["aggregate", "per_image"]
    assert list(doc["aggregate"]) == list(METRIC_KEYS)
    assert [r["name"] for r in doc["per_image"]] == ["a", "b"]
    assert doc["aggregate"]["recall"] == pytest.approx(1.0)
