"""Split-wide segmentation metrics from an accumulated confusion matrix."""

from __future__ import annotations

import numpy as np

IGNORE = 255


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_labels: int, ignore: int = IGNORE) -> np.ndarray:
    """(num_labels, num_labels) counts, rows = ground truth, cols = prediction; ignore pixels dropped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    keep = (gt != ignore) & (pred != ignore)
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if p.size and (p.max() >= num_labels or g.max() >= num_labels or min(p.min(), g.min()) < 0):
        raise ValueError(f"mask contains a class index outside [0, {num_labels})")
    return np.bincount(g * num_labels + p, minlength=num_labels ** 2).reshape(num_labels, num_labels)


def iou_from_confusion(cm: np.ndarray, include_background: bool = True) -> tuple[dict[int, float], float]:
    """Per-class IoU for classes with a non-empty union, and their mean."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    union = tp + fp + fn
    start = 0 if include_background else 1
    per = {c: float(tp[c] / union[c]) for c in range(start, len(cm)) if union[c] > 0}
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return per, mean


def fscore_from_confusion(cm: np.ndarray, beta2: float = 0.3) -> tuple[dict[int, float], float]:
    """F_beta per foreground class present in prediction or ground truth; P = R = 0 gives 0."""
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0).astype(np.float64)
    gt_pos = cm.sum(axis=1).astype(np.float64)
    per = {}
    for c in range(1, len(cm)):
        if pred_pos[c] == 0 and gt_pos[c] == 0:
            continue
        per[c] = f_beta(tp[c] / pred_pos[c] if pred_pos[c] else 0.0,
                        tp[c] / gt_pos[c] if gt_pos[c] else 0.0, beta2)
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return per, mean


def f_beta(precision: float, recall: float, beta2: float = 0.3) -> float:
    denom = beta2 * precision + recall
    if denom == 0:
        return 0.0
    return float((1.0 + beta2) * precision * recall / denom)


def miou(pred, gt, num_classes: int, include_background: bool = True) -> tuple[dict[int, float], float]:
    """num_classes counts foreground classes; labels are 0..num_classes."""
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes + 1), include_background)


def fscore(pred, gt, num_classes: int, beta2: float = 0.3) -> tuple[dict[int, float], float]:
    return fscore_from_confusion(confusion_matrix(pred, gt, num_classes + 1), beta2)


def frame_audio_accuracy(audio_logits: np.ndarray, truth: np.ndarray) -> float:
    """Micro-averaged binary accuracy of sigmoid(logit) > 0.5 (i.e. logit > 0) against (F, C) truth."""
    audio_logits = np.asarray(audio_logits)
    truth = np.asarray(truth, dtype=bool)
    if audio_logits.shape != truth.shape:
        raise ValueError(f"logits {audio_logits.shape} vs truth {truth.shape}")
    return float(np.mean((audio_logits > 0.0) == truth))
