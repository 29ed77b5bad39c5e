"""Salient-object-detection metric suite.

Implements F-score, weighted F-measure (Gaussian dependency weighting plus
distance-decay foreground weighting), Dice, enhanced-alignment e-measure,
structure s-measure, and MAE, along with per-split aggregation with
component-area pre-filtering.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imagery

EPS = 1e-12


@dataclass
class MetricParams:
    beta2: float = 0.3
    wf_beta2: float = 0.3
    smeasure_alpha: float = 0.5
    bin_threshold: float = 0.5
    area_range: tuple[int, int] | None = None


def _binarize(pred: np.ndarray, threshold: float) -> np.ndarray:
    return np.asarray(pred, dtype=np.float64) > threshold


def fscore(pred: np.ndarray, gt: np.ndarray, beta2: float = 0.3, bin_threshold: float = 0.5) -> float:
    p = _binarize(pred, bin_threshold)
    g = np.asarray(gt, dtype=bool)
    tp = float(np.sum(p & g))
    pred_pos = float(p.sum())
    gt_pos = float(g.sum())
    if pred_pos == 0 and gt_pos == 0:
        return 1.0
    if pred_pos == 0 or gt_pos == 0:
        return 0.0
    precision = tp / pred_pos
    recall = tp / gt_pos
    denom = beta2 * precision + recall
    if denom == 0:
        return 0.0
    return (1.0 + beta2) * precision * recall / denom


def dice(pred: np.ndarray, gt: np.ndarray, bin_threshold: float = 0.5) -> float:
    p = _binarize(pred, bin_threshold)
    g = np.asarray(gt, dtype=bool)
    total = float(p.sum() + g.sum())
    if total == 0:
        return 1.0
    return 2.0 * float(np.sum(p & g)) / total


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))))


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    gx = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(gx, gx)
    return k / k.sum()


def weighted_fmeasure(pred: np.ndarray, gt: np.ndarray, beta2: float = 0.3) -> float:
    """Weighted F-measure: errors propagated by a 7x7 sigma=5 Gaussian inside
    the foreground's dependency field and decayed with distance from the
    object, then combined as weighted precision/recall."""
    p = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    g = np.asarray(gt, dtype=bool)
    if not g.any():
        # no object: perfect only when the prediction is empty too
        return 1.0 if p.max() == 0 else 0.0
    e = np.abs(p - g.astype(np.float64))
    dst, idx = ndimage.distance_transform_edt(~g, return_indices=True)
    # errors outside the object inherit the error of the closest object pixel
    et = e.copy()
    et[~g] = e[idx[0][~g], idx[1][~g]]
    ea = ndimage.convolve(et, _gaussian_kernel(), mode="constant")
    min_e_ea = np.where(g & (e < ea), e, ea)
    # distance-decay weighting outside the object
    b = np.where(g, 1.0, 2.0 - np.exp(math.log(0.5) / 5.0 * dst))
    ew = min_e_ea * b
    tpw = float(g.sum()) - float(ew[g].sum())
    fpw = float(ew[~g].sum())
    recall = 1.0 - float(ew[g].mean())
    precision = tpw / (tpw + fpw + EPS)
    if recall <= 0 and precision <= 0:
        return 0.0
    q = (1.0 + beta2) * precision * recall / (beta2 * precision + recall + EPS)
    return float(np.clip(q, 0.0, 1.0))


def emeasure(pred: np.ndarray, gt: np.ndarray, bin_threshold: float = 0.5) -> float:
    """Enhanced-alignment measure between the binarized maps."""
    p = _binarize(pred, bin_threshold).astype(np.float64)
    g = np.asarray(gt, dtype=bool).astype(np.float64)
    n = g.size
    if g.sum() == 0:
        enhanced = 1.0 - p
    elif g.sum() == n:
        enhanced = p
    else:
        ap = p - p.mean()
        ag = g - g.mean()
        # denominator is strictly positive here: a binarized non-constant map
        # never equals its own mean, and constant maps take the branches above
        align = 2.0 * ap * ag / (ap * ap + ag * ag)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


def _ssim_region(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n <= 1:
        return 1.0
    mp, mg = p.mean(), g.mean()
    vp = ((p - mp) ** 2).sum() / (n - 1)
    vg = ((g - mg) ** 2).sum() / (n - 1)
    cov = ((p - mp) * (g - mg)).sum() / (n - 1)
    alpha = 4.0 * mp * mg * cov
    beta = (mp**2 + mg**2) * (vp + vg)
    if alpha != 0:
        return float(alpha / (beta + EPS))
    return 1.0 if beta == 0 else 0.0


def _object_score(p: np.ndarray, g: np.ndarray) -> float:
    if g.size == 0 or not g.any():
        return 0.0
    x = p[g].mean()
    sigma = p[g].std()
    return float(2.0 * x / (x * x + 1.0 + sigma + EPS))


def _centroid(g: np.ndarray) -> tuple[int, int]:
    """Quadrant cut indices; +0.5 keeps the split mirror-symmetric under flips."""
    if not g.any():
        return g.shape[0] // 2, g.shape[1] // 2
    rows, cols = np.nonzero(g)
    return int(round(rows.mean() + 0.5)), int(round(cols.mean() + 0.5))


def smeasure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure: object-aware plus 4-quadrant region similarity."""
    p = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    g = np.asarray(gt, dtype=bool)
    mu = g.mean()
    if mu == 0:
        return float(1.0 - p.mean())
    if mu == 1:
        return float(p.mean())
    s_o = mu * _object_score(p, g) + (1.0 - mu) * _object_score(1.0 - p, ~g)
    cy, cx = _centroid(g)
    h, w = g.shape
    cy = min(max(cy, 1), h - 1)
    cx = min(max(cx, 1), w - 1)
    quads = [
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ]
    total = float(h * w)
    s_r = 0.0
    for ys, xs in quads:
        gq = g[ys, xs].astype(np.float64)
        pq = p[ys, xs]
        weight = gq.size / total
        s_r += weight * _ssim_region(pq, gq)
    score = alpha * s_o + (1.0 - alpha) * s_r
    return float(np.clip(score, 0.0, 1.0))


METRIC_NAMES = ("fscore", "muwf", "dice", "emeasure", "smeasure", "mae")


@dataclass
class MetricReport:
    per_image: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["image_id", *METRIC_NAMES])
            writer.writeheader()
            for row in self.per_image:
                writer.writerow(row)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.aggregate, indent=2))


def area_filter_pred(pred: np.ndarray, area_range: tuple[int, int], bin_threshold: float = 0.5) -> np.ndarray:
    """Zero out components of the binarized prediction outside the area range."""
    binary = _binarize(pred, bin_threshold)
    kept = imagery.connected_components(binary, area_range[0], area_range[1])
    removed = binary & ~kept
    return np.where(removed, 0.0, np.asarray(pred, dtype=np.float64))


def evaluate_pair(pred: np.ndarray, gt: np.ndarray, params: MetricParams) -> dict:
    if params.area_range is not None:
        pred = area_filter_pred(pred, params.area_range, params.bin_threshold)
    return {
        "fscore": fscore(pred, gt, params.beta2, params.bin_threshold),
        "muwf": weighted_fmeasure(pred, gt, params.wf_beta2),
        "dice": dice(pred, gt, params.bin_threshold),
        "emeasure": emeasure(pred, gt, params.bin_threshold),
        "smeasure": smeasure(pred, gt, params.smeasure_alpha),
        "mae": mae(pred, gt),
    }


def evaluate_split(
    pairs: list[tuple[str, np.ndarray, np.ndarray]], params: MetricParams
) -> MetricReport:
    """Per-image metrics plus mean/stdev aggregates over (id, pred, gt) pairs."""
    report = MetricReport()
    for image_id, pred, gt in pairs:
        row = {"image_id": image_id}
        row.update(evaluate_pair(pred, gt, params))
        report.per_image.append(row)
    for name in METRIC_NAMES:
        vals = np.array([row[name] for row in report.per_image], dtype=np.float64)
        report.aggregate[name] = {
            "mean": float(vals.mean()) if vals.size else float("nan"),
            "stdev": float(vals.std()) if vals.size else float("nan"),
        }
    return report
