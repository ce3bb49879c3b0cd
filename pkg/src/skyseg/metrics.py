"""Segmentation accuracy and wire-volume accounting."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError

LABEL_BYTES = 2  # u16 class id
PROB_BYTES = 4  # f32 probability
STAT_BYTES = 2  # binary16 mean or variance


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """Rows are ground-truth classes, columns predicted classes."""
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    if pred.size and (pred.max() >= num_classes or gt.max() >= num_classes or pred.min() < 0 or gt.min() < 0):
        raise ParameterError("label outside [0, num_classes)")
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou(pred, gt, num_classes: int) -> float:
    """Mean IoU in percent over classes present in prediction or ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    cm = confusion_matrix(pred, gt, num_classes)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        return 100.0
    return float((tp[present] / union[present]).mean() * 100.0)


def volume_refinement(h: int, w: int) -> int:
    """Bytes of labels plus probabilities for an h×w refinement patch."""
    if h <= 0 or w <= 0:
        raise ParameterError("patch dims must be positive")
    return h * w * (LABEL_BYTES + PROB_BYTES)


def volume_stats(total_channels: int) -> int:
    """Bytes of one device's per-channel mean and variance."""
    if total_channels <= 0:
        raise ParameterError("channel count must be positive")
    return total_channels * 2 * STAT_BYTES


def volume_stats_per_follower(total_channels: int, followers: int) -> int:
    """Statistic bytes each follower sends per round to its ``followers - 1`` peers."""
    if followers <= 1:
        return 0
    return volume_stats(total_channels) * (followers - 1)
