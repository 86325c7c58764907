"""Segmentation losses and evaluation metrics.

Distances are in pixels unless a ``spacing`` multiplier is supplied.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, ops
from .errors import DataError, DimensionError

DICE_SMOOTH = 1e-5


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """[N,H,W] integer labels -> [N,C,H,W] float32 indicator."""
    labels = _check_labels(labels, num_classes)
    return (labels[:, None, :, :] == np.arange(num_classes)[None, :, None, None]).astype(np.float32)


def dice_ce_loss(logits: Tensor, target: np.ndarray) -> tuple[Tensor, Tensor]:
    """Soft Dice loss and mean pixelwise cross entropy."""
    if logits.ndim != 4:
        raise DimensionError(f"logits must be [N,C,H,W], got {logits.shape}")
    N, C, H, W = logits.shape
    target = np.asarray(target)
    if target.shape != (N, H, W):
        raise DimensionError(f"target shape {target.shape} does not match logits {logits.shape} on axes (0,2,3)")
    q = Tensor(one_hot(target, C))

    probs = ops.softmax(logits, axis=1)
    inter = ops.sum(ops.mul(probs, q), axis=(0, 2, 3))
    denom = ops.add(ops.sum(probs, axis=(0, 2, 3)), Tensor(q.data.sum(axis=(0, 2, 3))))
    dice = ops.div(ops.add(ops.mul(inter, 2.0), DICE_SMOOTH), ops.add(denom, DICE_SMOOTH))
    dice_loss = ops.sub(1.0, ops.mean(dice))

    logp = ops.log_softmax(logits, axis=1)
    ce_loss = ops.mul(ops.mean(ops.sum(ops.mul(logp, q), axis=1)), -1.0)
    return dice_loss, ce_loss


def dice_score(pred: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    """Hard per-class Dice; a class absent from both masks scores 1.0."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"pred shape {pred.shape} != target shape {target.shape}")
    scores = np.empty(num_classes, dtype=np.float64)
    for c in range(num_classes):
        p, t = pred == c, target == c
        total = int(p.sum()) + int(t.sum())
        scores[c] = 1.0 if total == 0 else 2.0 * int((p & t).sum()) / total
    return scores


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def pooled_surface_distances(pred_mask: np.ndarray, target_mask: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Distances from each boundary pixel of one mask to the other mask's boundary, both directions, concatenated."""
    bp, bt = boundary(pred_mask), boundary(target_mask)
    if not bp.any() or not bt.any():
        return np.array([np.inf])
    to_t = ndimage.distance_transform_edt(~bt)
    to_p = ndimage.distance_transform_edt(~bp)
    return np.concatenate([to_t[bp], to_p[bt]]).astype(np.float64) * spacing


def surface_distances(pred: np.ndarray, target: np.ndarray, class_id: int, spacing: float = 1.0) -> tuple[float, float]:
    """(hd95, asd) for one class of 2-D label maps.

    If the class is present in only one mask the distances are infinite.
    """
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"pred shape {pred.shape} != target shape {target.shape}")
    p, t = pred == class_id, target == class_id
    if not p.any() and not t.any():
        raise DataError(f"class {class_id} absent from both masks; surface distance undefined")
    d = pooled_surface_distances(p, t, spacing)
    if not np.all(np.isfinite(d)):
        return float("inf"), float("inf")
    return float(np.percentile(d, 95, method="linear")), float(d.mean())


@dataclass
class MetricReport:
    per_class_dice: list
    mean_dice: float
    hd95: float
    asd: float
    sample_id: int = 0
    per_class_hd95: list = field(default_factory=list)
    per_class_asd: list = field(default_factory=list)


def evaluate_sample(pred: np.ndarray, target: np.ndarray, num_classes: int, sample_id: int = 0, spacing: float = 1.0) -> MetricReport:
    """Metrics for one 2-D prediction.

    ``mean_dice``, ``hd95`` and ``asd`` average over foreground classes
    present in the ground truth; background is reported per class only.
    """
    dice = dice_score(pred, target, num_classes)
    present = [c for c in range(1, num_classes) if (target == c).any()]
    hd, asd = [], []
    for c in range(num_classes):
        if not ((pred == c).any() or (target == c).any()):
            hd.append(float("nan"))
            asd.append(float("nan"))
            continue
        h, a = surface_distances(pred, target, c, spacing)
        hd.append(h)
        asd.append(a)
    if present:
        mean_dice = float(np.mean([dice[c] for c in present]))
        mean_hd = float(np.mean([hd[c] for c in present]))
        mean_asd = float(np.mean([asd[c] for c in present]))
    else:
        mean_dice, mean_hd, mean_asd = 1.0, float("nan"), float("nan")
    return MetricReport(dice.tolist(), mean_dice, mean_hd, mean_asd, sample_id, hd, asd)


def reports_to_csv(reports: list[MetricReport], header: str = "") -> str:
    """Rows of (sample_id, class, dice, hd95, asd), one per foreground-or-background class."""
    buf = io.StringIO()
    if header:
        buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "class", "dice", "hd95", "asd"])
    for r in reports:
        for c, d in enumerate(r.per_class_dice):
            w.writerow([r.sample_id, c, f"{d:.6f}", f"{r.per_class_hd95[c]:.6f}", f"{r.per_class_asd[c]:.6f}"])
    return buf.getvalue()
