"""Overlap and boundary-distance metrics for label maps.

Boundary metrics use the union of both directed nearest-neighbour distance
multisets: ASD is its mean, HD95 its 95th percentile (linear interpolation).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial import cKDTree

from .data import CLASS_NAMES

METRIC_FIELDS = ("dice", "iou", "hd95", "asd", "acc", "pre", "sen", "spe")


class UndefinedBoundaryMetric(ValueError):
    """Boundary distances need two non-empty masks."""


@dataclass
class ClassMetrics:
    cls: int
    dice: float
    iou: float
    hd95: float  # NaN when undefined (exactly one mask empty)
    asd: float
    acc: float
    pre: float
    sen: float
    spe: float

    @property
    def boundary_defined(self) -> bool:
        return not math.isnan(self.hd95)


def _safe_ratio(num: float, den: float, empty: float) -> float:
    return num / den if den else empty


def overlap_metrics(pred, gt) -> tuple[float, float, float, float, float, float]:
    """(dice, iou, acc, pre, sen, spe) for two binary masks.

    Two empty masks count as perfect agreement (dice = iou = 1).
    """
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    dice = _safe_ratio(2 * tp, 2 * tp + fp + fn, 1.0)
    iou = _safe_ratio(tp, tp + fp + fn, 1.0)
    acc = (tp + tn) / p.size
    pre = _safe_ratio(tp, tp + fp, 1.0 if fn == 0 else 0.0)
    sen = _safe_ratio(tp, tp + fn, 1.0)
    spe = _safe_ratio(tn, tn + fp, 1.0)
    return dice, iou, acc, pre, sen, spe


def boundary_points(mask) -> np.ndarray:
    """Coordinates of foreground pixels with a background pixel among their 8 neighbours.

    Pixels on the image border count as boundary (outside is background).
    """
    m = np.asarray(mask, dtype=bool)
    interior = binary_erosion(m, structure=np.ones((3, 3), bool), border_value=0)
    return np.argwhere(m & ~interior).astype(np.float64)


def directed_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every point of ``a`` to its nearest point of ``b``."""
    return cKDTree(b).query(a, k=1)[0]


def boundary_metrics(pred, gt, spacing: float = 1.0) -> tuple[float, float]:
    """(hd95, asd) in units of ``spacing``; raises for empty masks."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        raise UndefinedBoundaryMetric("boundary metric undefined for an empty mask")
    bp, bg = boundary_points(p), boundary_points(g)
    d = np.concatenate([directed_distances(bp, bg), directed_distances(bg, bp)])
    return float(np.percentile(d, 95)) * spacing, float(d.mean()) * spacing


def class_metrics(pred_labels, gt_labels, cls: int, spacing: float = 1.0) -> ClassMetrics:
    p = np.asarray(pred_labels) == cls
    g = np.asarray(gt_labels) == cls
    dice, iou, acc, pre, sen, spe = overlap_metrics(p, g)
    if not p.any() and not g.any():
        hd95 = asd = 0.0
    elif not p.any() or not g.any():
        hd95 = asd = math.nan
    else:
        hd95, asd = boundary_metrics(p, g, spacing)
    return ClassMetrics(cls, dice, iou, hd95, asd, acc, pre, sen, spe)


def evaluate_labels(pred_labels, gt_labels, num_classes: int = 4, spacing: float = 1.0) -> list[ClassMetrics]:
    """Metrics for every foreground class (1 .. num_classes-1)."""
    return [class_metrics(pred_labels, gt_labels, c, spacing) for c in range(1, num_classes)]


def mean_dice(pred_labels, gt_labels, num_classes: int = 4) -> float:
    """Mean foreground Dice over a batch of label maps (pooled per class)."""
    p = np.asarray(pred_labels)
    g = np.asarray(gt_labels)
    scores = [overlap_metrics(p == c, g == c)[0] for c in range(1, num_classes)]
    return float(np.mean(scores))


def write_metrics_csv(rows: list[tuple[int, ClassMetrics]], path) -> None:
    """One row per (sample, class)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("sample", "class", "class_name") + METRIC_FIELDS)
        for sample, m in rows:
            w.writerow([sample, m.cls, CLASS_NAMES[m.cls] if m.cls < len(CLASS_NAMES) else m.cls]
                       + [f"{getattr(m, k):.6g}" for k in METRIC_FIELDS])


def summarize(rows: list[tuple[int, ClassMetrics]]) -> dict:
    """Per-class means; undefined boundary values are excluded and counted."""
    out: dict = {}
    by_cls: dict[int, list[ClassMetrics]] = {}
    for _, m in rows:
        by_cls.setdefault(m.cls, []).append(m)
    for c, ms in sorted(by_cls.items()):
        entry = {k: float(np.mean([getattr(m, k) for m in ms])) for k in ("dice", "iou", "acc", "pre", "sen", "spe")}
        for k in ("hd95", "asd"):
            vals = [getattr(m, k) for m in ms if not math.isnan(getattr(m, k))]
            entry[k] = float(np.mean(vals)) if vals else None
        entry["undefined_boundary"] = sum(not m.boundary_defined for m in ms)
        entry["n"] = len(ms)
        out[CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)] = entry
    return out


def write_summary(rows, path) -> dict:
    s = summarize(rows)
    Path(path).write_text(json.dumps(s, indent=2) + "\n")
    return s


def as_dict(m: ClassMetrics) -> dict:
    return asdict(m)
