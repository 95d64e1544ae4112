"""Instance-wise and token-wise cross-modal contrastive losses."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .autograd import Tensor, as_tensor, concat, l2_normalize, log, soft_cross_entropy_rows
from .autograd.tensor import ShapeError

log_ = logging.getLogger(__name__)

IGNORED = -1

SCORE_MODES = ("raw", "remap", "minmax")


class ConfigError(ValueError):
    pass


class CropError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class AlignmentConfig:
    tau_cmc: float = 0.07
    theta_pos: float = 0.55
    theta_neg: float = 0.45
    score_mode: str = "minmax"
    theta_pos_final: float | None = None
    theta_neg_final: float | None = None
    tau: float = 0.1
    eps: float = 1e-8
    k_crops: int = 8
    crop_scale: tuple[float, float] = (0.3, 0.6)
    rho: float = 0.3
    cmcc_frames_per_clip: int = 1
    lam_cmc: float = 1.0
    lam_cmpc: float = 0.025
    lam_cmcc: float = 1.0
    lam_cls: float = 1.0

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)
        if self.tau <= 0 or self.tau_cmc <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0.0 <= self.theta_neg <= self.theta_pos <= 1.0:
            raise ConfigError(f"need 0 <= theta_neg <= theta_pos <= 1, got {self.theta_neg}, {self.theta_pos}")
        if self.eps < 0:
            raise ConfigError("eps must be non-negative")
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"score_mode must be one of {SCORE_MODES}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("rho must lie in (0, 1)")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")

    def thresholds(self, progress: float) -> tuple[float, float]:
        """CMPC thresholds at training progress in [0, 1] (fixed unless final values are set)."""
        pos, neg = self.theta_pos, self.theta_neg
        if self.theta_pos_final is not None:
            pos += (self.theta_pos_final - pos) * progress
        if self.theta_neg_final is not None:
            neg += (self.theta_neg_final - neg) * progress
        return pos, neg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AlignmentConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- instance-wise contrast ------------------------------------------------------


@dataclass
class LabelConsistencyMatrix:
    raw: np.ndarray
    values: np.ndarray
    row_normalized: bool = True


def label_consistency(labels: Sequence[Sequence[int]]) -> LabelConsistencyMatrix:
    """Jaccard overlap of instance label sets, then row-normalised."""
    sets = [frozenset(s) for s in labels]
    if any(not s for s in sets):
        raise ValueError("every instance needs a non-empty label set")
    n = len(sets)
    raw = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            v = len(sets[i] & sets[j]) / len(sets[i] | sets[j])
            raw[i, j] = raw[j, i] = v
    sums = raw.sum(axis=1, keepdims=True)
    values = np.divide(raw, sums, out=np.zeros_like(raw), where=sums > 0)
    return LabelConsistencyMatrix(raw=raw, values=values)


def cmc_loss(a_sem, v_sem, v_cls, consistency: LabelConsistencyMatrix | np.ndarray, tau_cmc: float = 0.07) -> Tensor:
    """Six-term supervised contrast over the a_sem/v_sem, a_sem/v_cls and v_cls/v_sem similarity matrices."""
    a_sem, v_sem, v_cls = as_tensor(a_sem), as_tensor(v_sem), as_tensor(v_cls)
    target = consistency.values if isinstance(consistency, LabelConsistencyMatrix) else np.asarray(consistency)
    n = a_sem.shape[0]
    if n < 2:
        raise ValueError("cmc_loss needs at least two instances")
    if not (a_sem.shape == v_sem.shape == v_cls.shape) or target.shape != (n, n):
        raise ShapeError("cmc_loss inputs disagree in shape")
    a, vs, vc = l2_normalize(a_sem), l2_normalize(v_sem), l2_normalize(v_cls)
    total = None
    for x, y in ((a, vs), (a, vc), (vc, vs)):
        s = (x @ y.T) * (1.0 / tau_cmc)
        term = soft_cross_entropy_rows(s, target) + soft_cross_entropy_rows(s.T, target)
        total = term if total is None else total + term
    return total


# -- token-wise patch contrast ---------------------------------------------------


@dataclass
class PatchContrastLabels:
    labels: np.ndarray       # (..., P) in {1, 0, IGNORED}
    similarity: np.ndarray   # (..., P) cosine similarity to the frame's audio token
    n_pos: np.ndarray        # (...) same-label pair counts
    n_neg: np.ndarray        # (...) different-label pair counts


def labels_from_scores(scores: np.ndarray, theta_pos: float, theta_neg: float) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    out = np.full(scores.shape, IGNORED, dtype=np.int64)
    out[scores > theta_pos] = 1
    out[scores < theta_neg] = 0
    return out


def pair_counts(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    n1 = (labels == 1).sum(axis=-1)
    n0 = (labels == 0).sum(axis=-1)
    n_pos = n1 * (n1 - 1) // 2 + n0 * (n0 - 1) // 2
    return n_pos, n1 * n0


def similarity_scores(sim: np.ndarray, mode: str) -> np.ndarray:
    """Map cosine similarities (..., P) to threshold scores.

    raw: unchanged; remap: (s + 1) / 2; minmax: per-frame (s - min) / (max - min),
    with a constant frame mapping to 0.5 (everything lands in the ignore band).
    """
    if mode == "raw":
        return sim
    if mode == "remap":
        return (sim + 1.0) / 2.0
    if mode == "minmax":
        lo = sim.min(axis=-1, keepdims=True)
        span = sim.max(axis=-1, keepdims=True) - lo
        return np.where(span > 0, (sim - lo) / np.where(span > 0, span, 1.0), 0.5)
    raise ValueError(f"unknown score mode {mode!r}")


def patch_contrast_labels(v_pth, a_sem, theta_pos: float, theta_neg: float, mode: str = "remap") -> PatchContrastLabels:
    """Label each patch by its cosine similarity to the audio token of the same frame.

    Works on any leading shape: v_pth (..., P, D), a_sem (..., D).  ``mode`` picks
    how similarities become scores before thresholding (see ``similarity_scores``).
    Gradients are not tracked; the labels are targets.
    """
    v = np.asarray(v_pth.data if isinstance(v_pth, Tensor) else v_pth, dtype=np.float64)
    a = np.asarray(a_sem.data if isinstance(a_sem, Tensor) else a_sem, dtype=np.float64)
    vn = v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
    an = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    sim = np.einsum("...pd,...d->...p", vn, an)
    scores = similarity_scores(sim, mode)
    labels = labels_from_scores(scores, theta_pos, theta_neg)
    n_pos, n_neg = pair_counts(labels)
    return PatchContrastLabels(labels=labels, similarity=sim, n_pos=n_pos, n_neg=n_neg)


def cmpc_pair_weights(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame weight matrices (F, P, P) for the positive and negative pair sums (upper triangle only)."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[None]
    p = labels.shape[-1]
    upper = np.triu(np.ones((p, p), dtype=bool), k=1)
    valid = (labels[:, :, None] != IGNORED) & (labels[:, None, :] != IGNORED) & upper
    same = valid & (labels[:, :, None] == labels[:, None, :])
    diff = valid & ~same
    n_pos = same.sum(axis=(1, 2)).astype(np.float64)
    n_neg = diff.sum(axis=(1, 2)).astype(np.float64)
    w_pos = np.where(n_pos[:, None, None] > 0, same / np.maximum(n_pos, 1.0)[:, None, None], 0.0)
    w_neg = np.where(n_neg[:, None, None] > 0, diff / np.maximum(n_neg, 1.0)[:, None, None], 0.0)
    return w_pos, w_neg


def cmpc_loss(v_pth, labels: np.ndarray) -> Tensor:
    """Sum over frames of mean same-label dissimilarity plus mean different-label similarity.

    v_pth: (F, P, D) patch tokens, labels: (F, P).  Empty pair sets contribute 0.
    """
    v_pth = as_tensor(v_pth)
    if v_pth.ndim == 2:
        v_pth = v_pth.reshape(1, *v_pth.shape)
    w_pos, w_neg = cmpc_pair_weights(labels)
    if w_pos.shape[:2] != v_pth.shape[:2]:
        raise ShapeError(f"labels {np.shape(labels)} do not match patches {v_pth.shape}")
    vn = l2_normalize(v_pth)
    cs = vn @ vn.swapaxes(-1, -2)
    return ((1.0 - cs) * w_pos).sum() + (cs * w_neg).sum()


def cmpc_from_similarities(cs: np.ndarray, labels: np.ndarray) -> float:
    """Evaluate the patch contrast for a given pairwise cosine matrix (single frame)."""
    w_pos, w_neg = cmpc_pair_weights(labels)
    return float(((1.0 - cs) * w_pos[0]).sum() + (cs * w_neg[0]).sum())


# -- crops and class-token contrast -------------------------------------------------------


def make_crops(frame: np.ndarray, k_crops: int, scale_range: tuple[float, float], rng: np.random.Generator,
               out_size: int | None = None, max_attempts: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``k_crops`` random boxes and resize each (bilinear) to ``out_size``.

    Returns boxes (K, 4) as normalised (x0, y0, x1, y1) and crops (K, C, S, S).
    Width and height scales are drawn independently from ``scale_range``.
    """
    frame = np.asarray(frame, dtype=np.float64)
    c, h, w = frame.shape
    size = out_size or h
    lo, hi = scale_range
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError(f"scale_range must lie in (0, 1], got {scale_range}")
    boxes = np.zeros((k_crops, 4))
    crops = np.zeros((k_crops, c, size, size))
    for k in range(k_crops):
        for _ in range(max_attempts):
            sw, sh = rng.uniform(lo, hi, size=2)
            x0 = rng.uniform(0.0, 1.0 - sw) if sw < 1.0 else 0.0
            y0 = rng.uniform(0.0, 1.0 - sh) if sh < 1.0 else 0.0
            if sw * w >= 1.0 and sh * h >= 1.0:
                break
        else:
            raise CropError(f"could not sample a non-degenerate crop in {max_attempts} attempts")
        boxes[k] = (x0, y0, x0 + sw, y0 + sh)
        crops[k] = resize_box(frame, boxes[k], size)
    return boxes, crops


def resize_box(frame: np.ndarray, box: np.ndarray, size: int) -> np.ndarray:
    c, h, w = frame.shape
    x0, y0, x1, y1 = box
    cols = x0 * w + (np.arange(size) + 0.5) * ((x1 - x0) * w / size) - 0.5
    rows = y0 * h + (np.arange(size) + 0.5) * ((y1 - y0) * h / size) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([map_coordinates(frame[ch], [rr, cc], order=1, mode="nearest") for ch in range(c)])


def positive_coverage(box, patch_labels: np.ndarray) -> float:
    """Fraction of the box area covered by positive-labelled patch cells."""
    labels = np.asarray(patch_labels)
    gh, gw = labels.shape
    x0, y0, x1, y1 = box
    edges_x = np.arange(gw + 1) / gw
    edges_y = np.arange(gh + 1) / gh
    ov_x = np.clip(np.minimum(x1, edges_x[1:]) - np.maximum(x0, edges_x[:-1]), 0.0, None)
    ov_y = np.clip(np.minimum(y1, edges_y[1:]) - np.maximum(y0, edges_y[:-1]), 0.0, None)
    area = (x1 - x0) * (y1 - y0)
    return float((np.outer(ov_y, ov_x) * (labels == 1)).sum() / area)


def crop_polarity(box, patch_labels: np.ndarray, rho: float) -> bool:
    """True (positive) iff positive patches cover at least ``rho`` of the box."""
    return positive_coverage(box, patch_labels) >= rho


@dataclass
class CropTokens:
    g: Tensor                       # (A, D) anchor class tokens
    crops: Tensor                   # (A, K, D) crop class tokens
    boxes: np.ndarray               # (A, K, 4)
    positive: np.ndarray            # (A, K) bool


@dataclass
class CmccStats:
    anchors: int = 0
    no_positive: int = 0


def cmcc_loss(g, positives, negatives=None, tau: float = 0.1, eps: float = 1e-8) -> Tensor:
    """InfoNCE between one anchor token and its positive / negative crop tokens (minimised form).

    With no positive crops the loss is 0 and the anchor is logged as a no-positive case.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    g = as_tensor(g)
    d = g.shape[-1]
    pos = as_tensor(positives).reshape(-1, d)
    neg = None if negatives is None else as_tensor(negatives).reshape(-1, d)
    crops = pos if neg is None or neg.shape[0] == 0 else concat([pos, neg], axis=0)
    is_pos = np.zeros((1, crops.shape[0]), dtype=bool)
    is_pos[0, : pos.shape[0]] = True
    loss, _ = cmcc_batch(g.reshape(1, d), crops.reshape(1, crops.shape[0], d), is_pos, tau, eps)
    return loss


def cmcc_batch(g, crops, positive: np.ndarray, tau: float, eps: float) -> tuple[Tensor, CmccStats]:
    """Mean InfoNCE over anchors that have at least one positive crop.

    g: (A, D), crops: (A, K, D), positive: (A, K) bool.  Per positive crop the
    term is log(1 + sum_neg exp(z_n - z_p) + eps * exp(-z_p)), which equals the
    negated log-ratio and is non-negative by construction.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    g, crops = as_tensor(g), as_tensor(crops)
    positive = np.asarray(positive, dtype=bool)
    a, k, d = crops.shape
    stats = CmccStats(anchors=a)
    n_pos = positive.sum(axis=1)
    keep = n_pos > 0
    stats.no_positive = int((~keep).sum())
    if stats.no_positive:
        log_.info("cmcc: %d no-positive anchors", stats.no_positive)
    if not keep.any():
        return (g * 0.0).sum(), stats
    gn = l2_normalize(g).reshape(a, 1, d)
    cn = l2_normalize(crops)
    z = (cn @ gn.swapaxes(-1, -2)).reshape(a, k) * (1.0 / tau)
    diff = z.reshape(a, 1, k) - z.reshape(a, k, 1)       # [a, p, n] = z_n - z_p
    neg_mask = (~positive).astype(np.float64).reshape(a, 1, k)
    inner = (diff.exp() * neg_mask).sum(axis=-1)
    if eps > 0:
        inner = inner + (-z).exp() * eps
    per = log(inner + 1.0)
    weights = np.where(keep[:, None], positive / np.maximum(n_pos, 1)[:, None], 0.0) / keep.sum()
    return (per * weights).sum(), stats


# -- combined objective -------------------------------------------------------------------


LOSS_TERMS = ("cls", "cmc", "cmpc", "cmcc")


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)
    weighted: dict[str, float] = field(default_factory=dict)


def total_loss(terms: dict[str, Tensor | None], cfg: AlignmentConfig, enabled: dict[str, bool] | None = None) -> LossBreakdown:
    """Weighted sum of the classification and contrastive terms.

    ``terms['cls']`` is the sum of the video and frame-audio BCE.  Missing or
    disabled terms contribute nothing.
    """
    enabled = enabled or {}
    weights = {"cls": cfg.lam_cls, "cmc": cfg.lam_cmc, "cmpc": cfg.lam_cmpc, "cmcc": cfg.lam_cmcc}
    total = None
    raw, weighted = {}, {}
    for name in LOSS_TERMS:
        t = terms.get(name)
        if t is None:
            raw[name] = weighted[name] = 0.0
            continue
        value = t.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"loss term '{name}' is not finite: {value}")
        raw[name] = value
        lam = weights[name] if enabled.get(name, True) else 0.0
        if lam == 0.0:
            weighted[name] = 0.0
            continue
        part = t * lam
        weighted[name] = part.item()
        total = part if total is None else total + part
    if total is None:
        total = Tensor(0.0)
    if not math.isfinite(total.item()):
        raise NonFiniteLossError(f"total loss is not finite: {raw}")
    return LossBreakdown(total=total, terms=raw, weighted=weighted)
