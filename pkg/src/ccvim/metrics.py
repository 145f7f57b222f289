"""Evaluation metrics for semantic and instance segmentation.

Binary maps are any arrays where nonzero means foreground. Instance maps are
non-negative integer arrays, 0 = background, every other id one instance.
Ratios whose denominator is zero (for example sensitivity with no positive
pixels) are reported as 1.0: the condition they measure holds vacuously.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError

RATIO_METRICS = ("dice", "aji", "pq", "dq", "sq", "miou", "dsc", "acc", "sen", "spe")


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"prediction {a.shape} and ground truth {b.shape} differ in shape")


def _ratio(num: float, den: float) -> float:
    return 1.0 if den == 0 else num / den


def binary_stats(pred, gt) -> dict[str, float]:
    """Foreground IoU, Dice, accuracy, sensitivity and specificity."""
    p, g = np.asarray(pred) != 0, np.asarray(gt) != 0
    _same_shape(p, g)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return {
        "miou": _ratio(tp, tp + fp + fn),
        "dsc": _ratio(2 * tp, 2 * tp + fp + fn),
        "acc": _ratio(tp + tn, tp + tn + fp + fn),
        "sen": _ratio(tp, tp + fn),
        "spe": _ratio(tn, tn + fp),
    }


def ensemble_dice(pred, gt) -> float:
    p, g = np.asarray(pred) != 0, np.asarray(gt) != 0
    _same_shape(p, g)
    return _ratio(2 * np.count_nonzero(p & g), np.count_nonzero(p) + np.count_nonzero(g))


def _overlaps(pred: np.ndarray, gt: np.ndarray):
    """Instance ids, areas and the pairwise intersection table ``[n_gt, n_pred]``."""
    g_ids, g_inv = np.unique(gt, return_inverse=True)
    p_ids, p_inv = np.unique(pred, return_inverse=True)
    table = np.zeros((len(g_ids), len(p_ids)), dtype=np.int64)
    np.add.at(table, (g_inv.ravel(), p_inv.ravel()), 1)
    g_keep, p_keep = g_ids != 0, p_ids != 0
    inter = table[np.ix_(g_keep, p_keep)]
    g_area = table[g_keep].sum(axis=1)
    p_area = table[:, p_keep].sum(axis=0)
    return g_ids[g_keep], p_ids[p_keep], g_area, p_area, inter


def pq_dq_sq(pred, gt) -> tuple[float, float, float]:
    """Panoptic quality as detection quality x segmentation quality, IoU > 0.5 matches."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _same_shape(pred, gt)
    _, _, g_area, p_area, inter = _overlaps(pred, gt)
    union = g_area[:, None] + p_area[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros(inter.shape), where=union > 0)
    # above 0.5 every gt and pred can take part in at most one pair
    matched = iou > 0.5
    tp = int(matched.sum())
    fn = len(g_area) - tp
    fp = len(p_area) - tp
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = float(iou[matched].mean()) if tp else 0.0
    return dq * sq, dq, sq


def aji(pred, gt) -> float:
    """Aggregated Jaccard index; each gt instance greedily claims its best unused prediction."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _same_shape(pred, gt)
    _, _, g_area, p_area, inter = _overlaps(pred, gt)
    if len(g_area) == 0 and len(p_area) == 0:
        return 1.0
    used = np.zeros(len(p_area), dtype=bool)
    total_inter = 0
    total_union = 0
    for i in range(len(g_area)):
        union = g_area[i] + p_area - inter[i]
        iou = np.where(used, -1.0, inter[i] / np.maximum(union, 1))
        j = int(np.argmax(iou)) if len(iou) else -1
        if j >= 0 and iou[j] > 0:
            used[j] = True
            total_inter += int(inter[i, j])
            total_union += int(union[j])
        else:
            total_union += int(g_area[i])
    total_union += int(p_area[~used].sum())
    return _ratio(total_inter, total_union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the foreground (or the image)."""
    m = np.asarray(mask) != 0
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    return m & ~inner


def hd95(pred, gt, spacing: float = 1.0, return_flag: bool = False):
    """Symmetric 95th-percentile Hausdorff distance between mask boundaries.

    If either mask is empty the image diagonal is returned and the flag is set.
    """
    p, g = np.asarray(pred) != 0, np.asarray(gt) != 0
    _same_shape(p, g)
    if not p.any() or not g.any():
        diag = spacing * math.hypot(*p.shape)
        return (diag, True) if return_flag else diag
    bp, bg = boundary(p), boundary(g)
    d_to_g = ndimage.distance_transform_edt(~bg)
    d_to_p = ndimage.distance_transform_edt(~bp)
    val = spacing * max(np.percentile(d_to_g[bp], 95), np.percentile(d_to_p[bg], 95))
    return (float(val), False) if return_flag else float(val)


@dataclass
class MetricsReport:
    """Per-image metric rows; serialized as CSV with a trailing mean row."""
    columns: list[str]
    rows: list[dict[str, float]] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def add(self, values: dict[str, float], flags: str = "") -> None:
        for k, v in values.items():
            if not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")
        self.rows.append(dict(values))
        self.flags.append(flags)

    def mean(self) -> dict[str, float]:
        return {c: float(np.mean([r[c] for r in self.rows])) if self.rows else float("nan")
                for c in self.columns}

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image"] + self.columns + ["flags"])
            for i, (row, fl) in enumerate(zip(self.rows, self.flags)):
                w.writerow([i] + [repr(float(row[c])) for c in self.columns] + [fl])
            m = self.mean()
            w.writerow(["mean"] + [repr(m[c]) for c in self.columns] + [""])

    @staticmethod
    def read_csv(path) -> tuple[list[str], list[list[str]]]:
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        return rows[0], rows[1:]
