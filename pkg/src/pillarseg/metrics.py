"""Evaluation metrics: per-class IoU / mIoU on visible labeled cells, and
ranked-list average precision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class IoUResult:
    per_class: np.ndarray  # indexed by merged class id; NaN where undefined
    miou: float
    evaluated_cells: int

    def defined(self) -> dict[int, float]:
        return {i: float(v) for i, v in enumerate(self.per_class) if np.isfinite(v)}


def iou(pred: np.ndarray, gt: np.ndarray, visible: np.ndarray,
        supervised_indices: list[int], unlabeled_index: int) -> IoUResult:
    """Intersection over union per class, restricted to cells that are both
    visible and labeled in the ground truth. Classes absent from prediction
    and ground truth are reported as NaN and excluded from the mean."""
    if pred.shape != gt.shape or pred.shape != visible.shape:
        raise ShapeError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, "
                         f"visible {visible.shape}")
    mask = visible & (gt != unlabeled_index)
    n_eval = int(mask.sum())
    if n_eval == 0:
        raise ConfigError("no visible labeled cells to evaluate")
    p = pred[mask]
    g = gt[mask]
    num_merged = max(max(supervised_indices), unlabeled_index) + 1
    per_class = np.full(num_merged, np.nan)
    for k in supervised_indices:
        inter = int(np.sum((p == k) & (g == k)))
        union = int(np.sum((p == k) | (g == k)))
        if union > 0:
            per_class[k] = inter / union
    defined = per_class[np.isfinite(per_class)]
    if defined.size == 0:
        raise ConfigError("no class has a defined IoU")
    return IoUResult(per_class, float(defined.mean()), n_eval)


def average_precision(matches, num_gt: int) -> float:
    """Recall-step summation over a ranked detection list.

    ``matches`` holds one boolean per detection, already sorted by descending
    score; ``num_gt`` is the number of ground-truth positives."""
    if num_gt <= 0:
        raise ConfigError("average precision needs at least one ground-truth positive")
    matches = np.asarray(list(matches), dtype=bool)
    if matches.size == 0:
        return 0.0
    tp = np.cumsum(matches)
    ranks = np.arange(1, len(matches) + 1)
    precision = tp / ranks
    return float(precision[matches].sum() / num_gt)
