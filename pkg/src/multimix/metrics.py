"""Evaluation metrics for classification and segmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.stats import rankdata

SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
MASK_THRESHOLD = 0.5


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class MetricsReport:
    acc: float = math.nan
    f1_normal: float = math.nan
    f1_abnormal: float = math.nan
    ds: float = math.nan
    js: float = math.nan
    ssim: float = math.nan
    hd: float = math.nan
    precision: float = math.nan
    recall: float = math.nan
    auc: float = math.nan
    bland_altman_rows: list[tuple[float, float]] = field(default_factory=list)
    roc_rows: list[tuple[float, float, float]] = field(default_factory=list)
    dice_rows: list[float] = field(default_factory=list)

    SCALARS = ("acc", "f1_normal", "f1_abnormal", "ds", "js", "ssim", "hd", "precision", "recall", "auc")

    def scalars(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.SCALARS}


def binarize(mask, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    return np.asarray(mask) >= threshold


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _f1(tp: int, fp: int, fn: int) -> float:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def classification_metrics(pred, true) -> tuple[float, dict[int, float], dict[int, ConfusionCounts]]:
    """Accuracy, per-class F1 and one-vs-rest confusion counts for labels {0, 1}."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.size == 0 or pred.shape != true.shape:
        raise ValueError("classification_metrics needs equal-length, non-empty inputs")
    acc = float(np.mean(pred == true))
    f1, counts = {}, {}
    for c in (0, 1):
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        tn = int(pred.size - tp - fp - fn)
        counts[c] = ConfusionCounts(tp, fp, tn, fn)
        f1[c] = _f1(tp, fp, fn)
    return acc, f1, counts


def dice_jaccard(pred, ref) -> tuple[float, float]:
    a, b = _check_pair(pred, ref)
    inter = int(np.sum(a & b))
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0, 1.0
    return 2.0 * inter / (na + nb), inter / (na + nb - inter)


def precision_recall(pred, ref) -> tuple[float, float]:
    """Pixelwise precision and recall; 1 when both masks are empty, 0 for any other 0/0."""
    a, b = _check_pair(pred, ref)
    tp = int(np.sum(a & b))
    fp = int(np.sum(a & ~b))
    fn = int(np.sum(~a & b))
    if not a.any() and not b.any():
        return 1.0, 1.0
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r


def ssim(x, y, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all valid uniform windows (population moments, data range 1)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes differ {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ValueError(f"ssim: image {x.shape} smaller than {window}x{window} window")
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx, my = wx.mean(axis=(-2, -1)), wy.mean(axis=(-2, -1))
    vx = ((wx - mx[..., None, None]) ** 2).mean(axis=(-2, -1))
    vy = ((wy - my[..., None, None]) ** 2).mean(axis=(-2, -1))
    cov = ((wx - mx[..., None, None]) * (wy - my[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def _mean_nearest(src: np.ndarray, dst: np.ndarray) -> float:
    # distance from every pixel to the nearest foreground pixel of dst
    dist = ndimage.distance_transform_edt(~dst)
    return float(np.mean(dist[src]))


def avg_hausdorff(pred, ref) -> float:
    """Symmetric average Hausdorff distance between foreground pixel sets.

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    a, b = _check_pair(pred, ref)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return float(math.hypot(*a.shape))
    return 0.5 * (_mean_nearest(a, b) + _mean_nearest(b, a))


def roc_auc(scores, labels) -> tuple[float, list[tuple[float, float, float]]]:
    """Mann-Whitney AUC with mid-ranks for ties, plus (fpr, tpr, threshold) rows."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos, n_neg = int(np.sum(y == 1)), int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(s)
    auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    rows = [(0.0, 0.0, math.inf)]
    for thr in np.unique(s)[::-1]:
        pos = s >= thr
        rows.append((float(np.sum(pos & (y == 0)) / n_neg), float(np.sum(pos & (y == 1)) / n_pos), float(thr)))
    return float(auc), rows


@dataclass
class BlandAltman:
    rows: list[tuple[float, float]]
    mean_diff: float
    lower: float
    upper: float


def bland_altman_rows(preds, refs) -> BlandAltman:
    """Per-image (mean pixel count, predicted minus reference count) with 1.96-sigma limits."""
    rows = []
    for a, b in zip(preds, refs):
        na, nb = int(np.sum(a)), int(np.sum(b))
        rows.append(((na + nb) / 2.0, float(na - nb)))
    diffs = np.array([d for _, d in rows], dtype=np.float64)
    md = float(diffs.mean()) if diffs.size else math.nan
    sd = float(diffs.std(ddof=1)) if diffs.size > 1 else 0.0
    return BlandAltman(rows, md, md - 1.96 * sd, md + 1.96 * sd)


def segmentation_report(pred_probs, refs, report: MetricsReport | None = None) -> MetricsReport:
    """Fill the segmentation fields of ``report`` from per-image probability maps and binary references."""
    report = report or MetricsReport()
    preds = [binarize(p) for p in pred_probs]
    refs = [np.asarray(r, dtype=bool) for r in refs]
    if not preds:
        raise ValueError("empty segmentation dataset")
    ds, js, ss, hd, pp, rr = [], [], [], [], [], []
    for a, b in zip(preds, refs):
        d, j = dice_jaccard(a, b)
        p, r = precision_recall(a, b)
        ds.append(d)
        js.append(j)
        pp.append(p)
        rr.append(r)
        ss.append(ssim(a.astype(np.float64), b.astype(np.float64)))
        hd.append(avg_hausdorff(a, b))
    report.ds, report.js, report.ssim = float(np.mean(ds)), float(np.mean(js)), float(np.mean(ss))
    report.hd, report.precision, report.recall = float(np.mean(hd)), float(np.mean(pp)), float(np.mean(rr))
    report.dice_rows = ds
    report.bland_altman_rows = bland_altman_rows(preds, refs).rows
    return report


def classification_report(probs, labels, report: MetricsReport | None = None) -> MetricsReport:
    """Fill the classification fields from (n, 2) class probabilities."""
    report = report or MetricsReport()
    probs = np.asarray(probs)
    labels = np.asarray(labels).astype(int)
    acc, f1, _ = classification_metrics(probs.argmax(axis=1), labels)
    report.acc, report.f1_normal, report.f1_abnormal = acc, f1[0], f1[1]
    if len(np.unique(labels)) == 2:
        report.auc, report.roc_rows = roc_auc(probs[:, 1], labels)
    return report


def report_fields() -> list[str]:
    return [f.name for f in fields(MetricsReport) if f.name in MetricsReport.SCALARS]
