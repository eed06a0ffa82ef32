"""Per-image overlap metrics, aggregation and ROC/PR threshold sweeps."""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

METRIC_KEYS = ("mDice", "mIoU", "recall", "precision")
SMOOTH = 1e-8


def binarize(p, t=0.5):
    """A pixel is positive iff ``p >= t``."""
    return np.asarray(p) >= t


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_masks(cls, pred, g):
        pred, g = np.asarray(pred, bool), np.asarray(g, bool)
        if pred.shape != g.shape:
            raise ValueError(f"shape mismatch: {pred.shape} vs {g.shape}")
        tp = int(np.count_nonzero(pred & g))
        fp = int(np.count_nonzero(pred & ~g))
        fn = int(np.count_nonzero(~pred & g))
        return cls(tp, fp, fn, pred.size - tp - fp - fn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def dice_iou(pred, g, eps=SMOOTH):
    c = ConfusionCounts.from_masks(pred, g)
    dice = (2 * c.tp + eps) / (2 * c.tp + c.fp + c.fn + eps)
    iou = (c.tp + eps) / (c.tp + c.fp + c.fn + eps)
    return dice, iou


def recall_precision(pred, g, eps=SMOOTH):
    c = ConfusionCounts.from_masks(pred, g)
    return c.tp / (c.tp + c.fn + eps), c.tp / (c.tp + c.fp + eps)


def image_metrics(pred, g, eps=SMOOTH):
    dice, iou = dice_iou(pred, g, eps)
    recall, precision = recall_precision(pred, g, eps)
    return {"dice": dice, "iou": iou, "recall": recall, "precision": precision}


def aggregate(per_image):
    """Arithmetic means over images (no pixel pooling)."""
    if not per_image:
        raise ValueError("no images to aggregate")
    keys = {"mDice": "dice", "mIoU": "iou", "recall": "recall", "precision": "precision"}
    return {k: float(np.mean([m[v] for m in per_image])) for k, v in keys.items()}


def mean_std(values):
    """Mean and sample standard deviation (n - 1); std is 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def default_thresholds(n=256):
    return np.linspace(0.0, 1.0, n)


@dataclass
class Curves:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    recall: np.ndarray
    precision: np.ndarray

    def roc_auc(self):
        # ties in fpr must be walked upward in tpr
        order = np.lexsort((self.tpr, self.fpr))
        return float(np.trapezoid(self.tpr[order], self.fpr[order]))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "fpr", "tpr", "recall", "precision"])
            for row in zip(self.thresholds, self.fpr, self.tpr, self.recall, self.precision):
                w.writerow([f"{x:.8g}" for x in row])

    @classmethod
    def mean(cls, curves):
        """Pointwise average of curves sharing one threshold grid."""
        t = curves[0].thresholds
        if any(not np.array_equal(c.thresholds, t) for c in curves):
            raise ValueError("curves must share thresholds to be averaged")
        stack = lambda name: np.mean([getattr(c, name) for c in curves], axis=0)
        return cls(t, stack("fpr"), stack("tpr"), stack("recall"), stack("precision"))


def sweep_curves(probs, masks, thresholds=None):
    """Pixel-pooled ROC and PR points over a threshold sweep.

    ``probs`` and ``masks`` are sequences of per-image arrays (sizes may
    differ between images).
    """
    if len(probs) == 0:
        raise ValueError("empty test set")
    t = np.asarray(default_thresholds() if thresholds is None else thresholds, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be sorted")
    p = np.concatenate([np.asarray(x, np.float64).ravel() for x in probs])
    g = np.concatenate([np.asarray(x, bool).ravel() for x in masks])
    pos, neg = p[g], p[~g]
    pos.sort()
    neg.sort()
    # count of scores >= t via searchsorted on sorted scores
    tp = pos.size - np.searchsorted(pos, t, side="left")
    fp = neg.size - np.searchsorted(neg, t, side="left")
    tpr = tp / max(pos.size, 1)
    fpr = fp / max(neg.size, 1)
    precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 1.0)
    return Curves(t, fpr.astype(float), tpr.astype(float), tpr.astype(float), precision.astype(float))


@dataclass
class MetricsReport:
    names: list
    per_image: list
    curves: Curves = None
    aggregate: dict = field(init=False)

    def __post_init__(self):
        self.aggregate = aggregate(self.per_image)

    def to_text(self):
        """JSON with fixed key order: aggregate, then per-image in sorted name order."""
        order = sorted(range(len(self.names)), key=lambda i: self.names[i])
        doc = {
            "aggregate": {k: self.aggregate[k] for k in METRIC_KEYS},
            "per_image": [
                {"name": self.names[i], **{k: self.per_image[i][k] for k in ("dice", "iou", "recall", "precision")}}
                for i in order
            ],
        }
        return json.dumps(doc, indent=2) + "\n"
