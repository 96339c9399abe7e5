"""Saliency evaluation: S-measure, max E-measure, max F-measure, MAE and PR curves.

All per-image functions take a prediction ``pred`` with values in [0, 1] and
a binary mask ``gt``. Thresholds are ``k / 255`` for ``k = 0..255`` and a
pixel counts as foreground at threshold ``t`` when ``pred > t``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

EPS = np.spacing(1)
BETA2 = 0.3
N_THRESHOLDS = 256
THRESHOLDS = np.arange(N_THRESHOLDS) / 255.0


def _as_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and mask {gt.shape} differ in shape")
    return pred, gt


def normalize_map(pred):
    """Per-image min-max normalization; constant maps are returned unchanged."""
    pred = np.asarray(pred, dtype=np.float64)
    lo, hi = pred.min(), pred.max()
    if hi > lo:
        return (pred - lo) / (hi - lo)
    return pred


def mae(pred, gt) -> float:
    pred, gt = _as_pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def _foreground_counts(pred, mask):
    """Number of pixels of ``pred[mask]`` above each threshold."""
    # index of the largest threshold strictly below the value; -1 if none
    level = np.searchsorted(THRESHOLDS, pred[mask], side="left") - 1
    hist = np.bincount(level + 1, minlength=N_THRESHOLDS + 1)[1:]
    return np.cumsum(hist[::-1])[::-1]


def pr_curve(pred, gt):
    pred, gt = _as_pair(pred, gt)
    tp = _foreground_counts(pred, gt).astype(np.float64)
    fp = _foreground_counts(pred, ~gt).astype(np.float64)
    positives = tp + fp
    precision = np.divide(tp, positives, out=np.zeros_like(tp), where=positives > 0)
    recall = tp / max(np.count_nonzero(gt), 1)
    return precision, recall


def f_from_pr(precision, recall, beta2: float = BETA2):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    num = (1 + beta2) * precision * recall
    den = beta2 * precision + recall
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def f_measure_curve(pred, gt, beta2: float = BETA2):
    """Precision, recall (256 thresholds) and the max F-measure of one image."""
    precision, recall = pr_curve(pred, gt)
    return precision, recall, float(f_from_pr(precision, recall, beta2).max())


def e_measure_curve(pred, gt):
    """E-measure at every threshold and its maximum."""
    pred, gt = _as_pair(pred, gt)
    n = gt.size
    n_gt = np.count_nonzero(gt)
    fg_fg = _foreground_counts(pred, gt).astype(np.float64)
    fg_bg = _foreground_counts(pred, ~gt).astype(np.float64)
    n_pred = fg_fg + fg_bg
    if n_gt == 0:
        total = n - n_pred
    elif n_gt == n:
        total = n_pred
    else:
        bg_fg = n_gt - fg_fg
        bg_bg = (n - n_pred) - bg_fg
        mean_pred = n_pred / n
        mean_gt = n_gt / n
        total = np.zeros(N_THRESHOLDS)
        for count, phi_p, phi_g in (
            (fg_fg, 1 - mean_pred, 1 - mean_gt),
            (fg_bg, 1 - mean_pred, -mean_gt),
            (bg_fg, -mean_pred, 1 - mean_gt),
            (bg_bg, -mean_pred, -mean_gt),
        ):
            align = 2 * phi_p * phi_g / (phi_p ** 2 + phi_g ** 2 + EPS)
            total += count * (align + 1) ** 2 / 4
    curve = total / n
    return curve, float(curve.max())


def _object_score(values):
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * x / (x * x + 1 + sigma + EPS)


def _ssim(pred, gt):
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def centroid(gt):
    """1-based (row, col) split point: rounded foreground centroid plus one."""
    h, w = gt.shape
    if not gt.any():
        return int(round(h / 2)), int(round(w / 2))
    rows, cols = np.nonzero(gt)
    return int(np.round(rows.mean())) + 1, int(np.round(cols.mean())) + 1


def s_object(pred, gt):
    mu = gt.mean()
    fg = _object_score(pred[gt])
    bg = _object_score(1 - pred[~gt])
    return mu * fg + (1 - mu) * bg


def s_region(pred, gt):
    h, w = gt.shape
    y, x = centroid(gt)
    g = gt.astype(np.float64)
    score = 0.0
    for rs, cs in ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
                   (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))):
        p, q = pred[rs, cs], g[rs, cs]
        score += q.size / gt.size * _ssim(p, q)
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _as_pair(pred, gt)
    mu = gt.mean()
    if mu == 0:
        score = 1 - pred.mean()
    elif mu == 1:
        score = pred.mean()
    else:
        score = alpha * s_object(pred, gt) + (1 - alpha) * s_region(pred, gt)
    return float(min(1.0, max(0.0, score)))


@dataclass
class MetricReport:
    s_alpha: float
    max_f: float
    max_e: float
    mae: float
    precision: list
    recall: list
    n_samples: int
    n_empty_gt: int = 0
    pr_averaging: str = "dataset-mean"
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"s_alpha": self.s_alpha, "max_f": self.max_f, "max_e": self.max_e,
                "mae": self.mae, "n_samples": self.n_samples}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "MetricReport":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s_alpha", "max_f", "max_e", "mae", "n_samples"])
            w.writerow([self.s_alpha, self.max_f, self.max_e, self.mae, self.n_samples])

    def pr_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for k, (p, r) in enumerate(zip(self.precision, self.recall)):
                w.writerow([k, p, r])


def evaluate_maps(pairs: Iterable, normalize: bool = True, smeasure_alpha: float = 0.5,
                  meta: Optional[dict] = None) -> MetricReport:
    """Aggregate metrics over ``(pred, gt)`` pairs.

    S, E and MAE are per-image means. Precision and recall are averaged
    over images with a non-empty mask, and max F is taken on those means.
    """
    sms, ems, maes, precs, recs = [], [], [], [], []
    n_empty = 0
    for pred, gt in pairs:
        pred, gt = _as_pair(pred, gt)
        if normalize:
            pred = normalize_map(pred)
        sms.append(s_measure(pred, gt, smeasure_alpha))
        ems.append(e_measure_curve(pred, gt)[0])
        maes.append(mae(pred, gt))
        if gt.any():
            p, r = pr_curve(pred, gt)
            precs.append(p)
            recs.append(r)
        else:
            n_empty += 1
    if not sms:
        raise ValueError("no samples to evaluate")
    if precs:
        precision = np.mean(precs, axis=0)
        recall = np.mean(recs, axis=0)
        max_f = float(f_from_pr(precision, recall).max())
    else:
        precision = recall = np.zeros(N_THRESHOLDS)
        max_f = 0.0
    return MetricReport(
        s_alpha=float(np.mean(sms)),
        max_f=max_f,
        max_e=float(min(1.0, np.mean(ems, axis=0).max())),
        mae=float(np.mean(maes)),
        precision=precision.tolist(),
        recall=recall.tolist(),
        n_samples=len(sms),
        n_empty_gt=n_empty,
        meta=dict(meta or {}),
    )
