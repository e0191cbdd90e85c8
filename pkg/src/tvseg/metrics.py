"""Pixel-level segmentation metrics, threshold sweeps and PR curves.

Aggregates are micro-averaged: confusions are summed over images before
any ratio is taken. Empty-vs-empty cases score 1 (both masks empty means
perfect agreement).
"""
from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .errors import DimensionError, NotComputable

DEFAULT_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 9))


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize(probs, threshold: float) -> np.ndarray:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return np.asarray(probs) >= threshold


def confusion(pred, gt) -> Confusion:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return Confusion(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int, empty: int, exact: bool):
    if den == 0:
        return Fraction(empty) if exact else float(empty)
    return Fraction(num, den) if exact else num / den


def precision(c: Confusion, exact: bool = False):
    return _ratio(c.tp, c.tp + c.fp, int(c.tp + c.fp + c.fn == 0), exact)


def recall(c: Confusion, exact: bool = False):
    return _ratio(c.tp, c.tp + c.fn, int(c.tp + c.fp + c.fn == 0), exact)


def dice(c: Confusion, exact: bool = False):
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, 1, exact)


def iou(c: Confusion, cls: str = "foreground", exact: bool = False):
    if cls == "foreground":
        return _ratio(c.tp, c.tp + c.fp + c.fn, 1, exact)
    if cls == "background":
        return _ratio(c.tn, c.tn + c.fp + c.fn, 1, exact)
    raise ValueError(f"cls must be 'foreground' or 'background', got {cls!r}")


def miou(c: Confusion, exact: bool = False):
    return (iou(c, "foreground", exact) + iou(c, "background", exact)) / 2


def summary(c: Confusion) -> dict:
    return {
        "precision": precision(c),
        "recall": recall(c),
        "dice": dice(c),
        "iou_foreground": iou(c, "foreground"),
        "iou_background": iou(c, "background"),
        "miou": miou(c),
    }


def recall_ci(per_image_recalls, confidence: float = 0.95) -> float:
    """Normal-approximation half-width ``z * s / sqrt(n)`` of the mean per-image recall."""
    r = [float(v) for v in per_image_recalls]
    if len(r) < 2:
        raise NotComputable(f"recall CI needs >= 2 images with foreground, got {len(r)}")
    z = statistics.NormalDist().inv_cdf(0.5 + confidence / 2)
    # statistics.stdev is exact for identical values, np.std is not
    return z * statistics.stdev(r) / math.sqrt(len(r))


@dataclass
class MetricsReport:
    threshold: float
    confusion: Confusion
    precision: float
    recall: float
    dice: float
    iou_foreground: float
    iou_background: float
    miou: float
    recall_ci_halfwidth: float | None = None
    per_image: list = field(default_factory=list)


def report_at(probs_per_image, gts, threshold: float) -> MetricsReport:
    total = Confusion()
    per_image = []
    for p, g in zip(probs_per_image, gts):
        c = confusion(binarize(p, threshold), g)
        total = total + c
        per_image.append({"confusion": c, **summary(c)})
    valid = [m["recall"] for m in per_image if m["confusion"].tp + m["confusion"].fn > 0]
    try:
        ci = recall_ci(valid)
    except NotComputable:
        ci = None
    return MetricsReport(threshold, total, recall_ci_halfwidth=ci, per_image=per_image, **summary(total))


def threshold_sweep(probs_per_image, gts, thresholds=DEFAULT_THRESHOLDS) -> list[MetricsReport]:
    probs_per_image = list(probs_per_image)
    gts = list(gts)
    if len(probs_per_image) != len(gts):
        raise DimensionError(f"{len(probs_per_image)} probability maps but {len(gts)} ground truths")
    return [report_at(probs_per_image, gts, float(t)) for t in thresholds]


@dataclass
class PRCurve:
    thresholds: np.ndarray  # distinct probabilities, decreasing
    recall: np.ndarray
    precision: np.ndarray

    def __len__(self):
        return len(self.thresholds)


def pr_curve(probs_per_image, gts) -> PRCurve:
    """Pooled-pixel PR points, one per distinct predicted probability.

    Point ``i`` classifies ``p >= thresholds[i]`` as foreground.
    """
    p = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in probs_per_image]) if len(probs_per_image) else np.zeros(0)
    y = np.concatenate([np.asarray(g, dtype=bool).ravel() for g in gts]) if len(gts) else np.zeros(0, bool)
    if p.shape != y.shape:
        raise DimensionError(f"{p.size} pooled probabilities but {y.size} ground-truth pixels")
    positives = int(y.sum())
    if positives == 0:
        raise NotComputable("PR curve needs at least one foreground pixel")
    order = np.argsort(-p, kind="stable")
    ps, ys = p[order], y[order]
    tp = np.cumsum(ys)
    # last index of each run of equal probabilities
    ends = np.flatnonzero(np.r_[ps[1:] != ps[:-1], True])
    tp_at = tp[ends]
    predicted = ends + 1
    return PRCurve(ps[ends], tp_at / positives, tp_at / predicted)


def average_precision(curve: PRCurve) -> float:
    """``sum_i (R_i - R_{i-1}) * P_i`` over points in order of increasing recall, ``R_0 = 0``."""
    r = np.r_[0.0, curve.recall]
    return float(np.sum(np.diff(r) * curve.precision))


def matched_recall_threshold(curve: PRCurve, target: float, tolerance: float = 0.02):
    """Threshold whose recall is closest to ``target``.

    Returns ``(threshold, achieved_recall)`` or None if no point lies within
    ``tolerance`` of the target.
    """
    r = curve.recall  # non-decreasing along the curve
    i = int(np.searchsorted(r, target))
    candidates = [j for j in (i - 1, i) if 0 <= j < len(r)]
    # ties go to the higher threshold
    best = min(candidates, key=lambda j: (abs(r[j] - target), j))
    if abs(r[best] - target) > tolerance:
        return None
    return float(curve.thresholds[best]), float(r[best])


def label_components(mask) -> tuple[np.ndarray, int]:
    """4-connected labelling; labels ``1..count`` in row-major discovery order."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DimensionError(f"connected components need a 2-D mask, got shape {mask.shape}")
    labels, count = ndimage.label(mask)  # default structure is the 4-neighbour cross
    return labels, int(count)


def connected_components(mask) -> tuple[int, list[int]]:
    labels, count = label_components(mask)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return count, [int(s) for s in sizes]


def fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return f"{v:.6f}"


SWEEP_COLUMNS = ("threshold", "recall", "recall_ci", "precision", "miou", "dice")


def sweep_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in reports:
        w.writerow([fmt(r.threshold), fmt(r.recall), fmt(r.recall_ci_halfwidth),
                    fmt(r.precision), fmt(r.miou), fmt(r.dice)])
    return buf.getvalue()


def pr_csv(curve: PRCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("recall", "precision"))
    for r, p in zip(curve.recall, curve.precision):
        w.writerow((fmt(r), fmt(p)))
    w.writerow(("AP", fmt(average_precision(curve))))
    return buf.getvalue()


def pr_svg(curve: PRCurve, size: int = 400, margin: int = 40) -> str:
    """Standalone SVG: axes, tick labels and one polyline for the PR curve."""
    span = size - 2 * margin

    def xy(r, p):
        return margin + r * span, size - margin - p * span

    pts = " ".join("%.2f,%.2f" % xy(r, p) for r, p in zip(curve.recall, curve.precision))
    x0, y0 = xy(0, 0)
    x1, y1 = xy(1, 1)
    ticks = []
    for v in (0.0, 0.5, 1.0):
        tx, _ = xy(v, 0)
        _, ty = xy(0, v)
        ticks.append(f'<text x="{tx:.2f}" y="{y0 + 15:.2f}" font-size="10" text-anchor="middle">{v:.1f}</text>')
        ticks.append(f'<text x="{x0 - 5:.2f}" y="{ty + 3:.2f}" font-size="10" text-anchor="end">{v:.1f}</text>')
    ap = average_precision(curve)
    return "\n".join([
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y0:.2f}" stroke="black"/>',
        f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x0:.2f}" y2="{y1:.2f}" stroke="black"/>',
        *ticks,
        f'<text x="{size / 2:.2f}" y="{size - 8}" font-size="12" text-anchor="middle">recall</text>',
        f'<text x="12" y="{size / 2:.2f}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {size / 2:.2f})">precision</text>',
        f'<text x="{size / 2:.2f}" y="20" font-size="12" text-anchor="middle">AP = {ap:.3f}</text>',
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>',
        "</svg>",
        "",
    ])
