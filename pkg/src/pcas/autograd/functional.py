"""Loss building blocks composed from registered kernels."""

from __future__ import annotations

import logging

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, l2_normalize, log_softmax, softplus

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-6


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity of two equal-length vectors.

    Zero-norm inputs raise ``ZeroNormError`` unless ``norm_guard`` is active,
    in which case the norm is clamped to 1e-12.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    return (l2_normalize(a) * l2_normalize(b)).sum()


def cosine_matrix(x, y) -> Tensor:
    """Pairwise cosine similarities between the rows of ``x`` (N×D) and ``y`` (M×D)."""
    return l2_normalize(x) @ l2_normalize(y).T


def soft_cross_entropy_rows(logits, target) -> Tensor:
    """Mean over rows of ``-sum_j T_ij log softmax(S_i)_j``.

    Target rows that are entirely zero are skipped (with a warning); every other
    row must sum to one.
    """
    logits = as_tensor(logits)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if logits.ndim != 2 or logits.shape != target.shape:
        raise ShapeError(f"soft CE needs matching 2-D inputs, got {logits.shape} and {target.shape}")
    sums = target.sum(axis=1)
    empty = np.all(target == 0, axis=1)
    bad = ~empty & (np.abs(sums - 1.0) > ROW_SUM_TOL)
    if np.any(bad):
        raise ValueError(f"target rows {np.flatnonzero(bad).tolist()} do not sum to 1")
    keep = np.flatnonzero(~empty)
    if len(keep) < len(target):
        log.warning("soft_cross_entropy_rows: skipping %d all-zero target rows", len(target) - len(keep))
    if len(keep) == 0:
        return (logits * 0.0).sum()
    if len(keep) < len(target):
        logits = logits[keep]
        target = target[keep]
    return -(log_softmax(logits) * target).sum() / float(len(keep))


def bce_with_logits(logits, targets) -> Tensor:
    """Mean per-element binary cross-entropy, computed as softplus(x) - x*y."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if logits.shape != y.shape:
        raise ShapeError(f"bce shape mismatch {logits.shape} vs {y.shape}")
    return (softplus(logits) - logits * y).mean()


def pixel_cross_entropy(logits, mask, ignore_index: int = 255) -> Tensor | None:
    """Mean cross-entropy over non-ignored pixels.

    ``logits`` is (B, K, H, W), ``mask`` (B, H, W) of class indices.  Returns
    ``None`` when every pixel is ignored.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask)
    b, k, h, w = logits.shape
    if mask.shape != (b, h, w):
        raise ShapeError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    flat = logits.transpose(0, 2, 3, 1).reshape(b * h * w, k)
    labels = mask.reshape(-1)
    valid = np.flatnonzero(labels != ignore_index)
    if len(valid) == 0:
        return None
    if np.any(labels[valid] >= k):
        raise ValueError("mask contains class index outside the logit range")
    logp = log_softmax(flat)
    picked = logp[(valid, labels[valid].astype(np.int64))]
    return -picked.sum() / float(len(valid))
