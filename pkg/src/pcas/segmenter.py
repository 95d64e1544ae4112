"""CAM pseudo-labels gated by frame audio, a small upsampling decoder, and dense-CRF refinement."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import expit

from .autograd import Linear, Module, Tensor, conv2d, no_grad, param, relu, softmax, upsample_nearest
from .autograd.functional import pixel_cross_entropy

BACKGROUND = 0
IGNORE = 255
ROW_SUM_TOL = 1e-6


@dataclass
class SegmenterConfig:
    theta_fg: float = 0.45
    theta_bg: float = 0.15
    theta_act: float = 0.5
    crf_iters: int = 5
    crf_spatial_sigma: float = 3.0
    crf_spatial_weight: float = 1.0
    crf_bilateral_sigma_xy: float = 16.0
    crf_bilateral_sigma_rgb: float = 0.1
    crf_bilateral_weight: float = 2.0
    decoder_channels: tuple[int, int] = (32, 16)

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if not 0 < self.theta_bg <= self.theta_fg < 1:
            raise ValueError("need 0 < theta_bg <= theta_fg < 1")
        if not 0 < self.theta_act < 1:
            raise ValueError("theta_act must lie in (0, 1)")
        if self.crf_iters < 0:
            raise ValueError("crf_iters must be >= 0")
        if len(self.decoder_channels) != 2 or min(self.decoder_channels) < 1:
            raise ValueError("decoder_channels needs two positive sizes")
        if min(self.crf_spatial_sigma, self.crf_bilateral_sigma_xy, self.crf_bilateral_sigma_rgb) <= 0:
            raise ValueError("CRF kernel widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SegmenterConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- CAM ------------------------------------------------------------------------------


@dataclass
class CamVolume:
    """Normalized maps for the active classes of one frame.

    ``classes`` are 1-based ids in ascending order; ``maps`` is (len(classes), G, G)
    with every map in [0, 1].  ``lo``/``hi`` hold the pre-normalization range.
    """

    classes: tuple[int, ...]
    maps: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def grid(self) -> int:
        return self.maps.shape[-1]


def compute_cam(v_pth_grid: np.ndarray, head_weights: np.ndarray, active_classes) -> CamVolume:
    """v_pth_grid (G, G, D), head_weights (C, D) -> per-class ReLU(<w_c, token>) min-max normalized.

    A constant map (max == min) normalizes to all zeros.
    """
    tokens = np.asarray(v_pth_grid, dtype=np.float64)
    w = np.asarray(head_weights, dtype=np.float64)
    g = tokens.shape[0]
    classes = tuple(sorted(int(c) for c in set(active_classes)))
    if not classes:
        empty = np.zeros((0, g, g))
        return CamVolume((), empty, np.zeros(0), np.zeros(0))
    if min(classes) < 1 or max(classes) > w.shape[0]:
        raise ValueError(f"active classes {classes} outside 1..{w.shape[0]}")
    raw = np.maximum(np.einsum("ghd,cd->cgh", tokens, w[np.array(classes) - 1]), 0.0)
    lo = raw.min(axis=(1, 2))
    hi = raw.max(axis=(1, 2))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    maps = np.where(span[:, None, None] > 0, (raw - lo[:, None, None]) / safe[:, None, None], 0.0)
    return CamVolume(classes, maps, lo, hi)


def audio_gate(audio_logits_t: np.ndarray, theta_act: float, clip_labels) -> set[int]:
    """Classes of the clip whose frame-level audio probability exceeds theta_act."""
    logits = np.asarray(audio_logits_t, dtype=np.float64)
    probs = expit(logits)
    return {int(c) for c in clip_labels if probs[int(c) - 1] > theta_act}


def pseudo_mask(cam: CamVolume, theta_fg: float, theta_bg: float, image_size: int | None = None) -> np.ndarray:
    """Grid-level labels (argmax class, ties -> lower id) upsampled nearest to image_size."""
    g = cam.grid
    if not cam.classes:
        grid = np.zeros((g, g), dtype=np.uint8)
    else:
        best = np.argmax(cam.maps, axis=0)  # first maximum == lowest class id
        m = np.take_along_axis(cam.maps, best[None], axis=0)[0]
        ids = np.asarray(cam.classes, dtype=np.uint8)[best]
        grid = np.full((g, g), IGNORE, dtype=np.uint8)
        grid[m > theta_fg] = ids[m > theta_fg]
        grid[m < theta_bg] = BACKGROUND
    return grid if image_size is None else upsample_labels(grid, image_size)


def upsample_labels(grid: np.ndarray, image_size: int) -> np.ndarray:
    """Nearest upsampling of (..., g, g) label grids to (..., image_size, image_size)."""
    g = grid.shape[-1]
    if image_size == g:
        return grid
    if image_size % g:
        raise ValueError(f"image size {image_size} is not a multiple of grid {g}")
    f = image_size // g
    return np.repeat(np.repeat(grid, f, axis=-2), f, axis=-1)


def clip_pseudo_masks(v_pth: np.ndarray, audio_logits: np.ndarray, head_weights: np.ndarray, clip_labels,
                      cfg: SegmenterConfig, image_size: int | None = None) -> np.ndarray:
    """Pseudo masks for one clip from patch tokens (T, P, D) and frame audio logits (T, C).

    Returns (T, H, W) at ``image_size``, or the (T, g, g) grid labels when it is None.
    """
    t, p, d = v_pth.shape
    g = int(round(np.sqrt(p)))
    size = g if image_size is None else image_size
    out = np.empty((t, size, size), dtype=np.uint8)
    for i in range(t):
        active = audio_gate(audio_logits[i], cfg.theta_act, clip_labels)
        cam = compute_cam(v_pth[i].reshape(g, g, d), head_weights, active)
        out[i] = pseudo_mask(cam, cfg.theta_fg, cfg.theta_bg, image_size)
    return out


# -- decoder ---------------------------------------------------------------------------


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = param(rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        self.bias = param(np.zeros(c_out))
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.pad)


class MaskDecoder(Module):
    """Patch grid -> (C+1)-way pixel logits.

    Two stages of (x2 nearest upsample, 3x3 conv, ReLU), a 3x3 classifier conv,
    then nearest upsampling by whatever factor is left to reach the image size.
    """

    def __init__(self, embed_dim: int, num_classes: int, grid: int, image_size: int,
                 channels: tuple[int, int], rng: np.random.Generator):
        c1, c2 = channels
        self.grid = grid
        self.image_size = image_size
        self.num_classes = num_classes
        self.reduce = Linear(embed_dim, c1, rng)
        self.up1 = Conv(c1, c1, rng)
        self.up2 = Conv(c1, c2, rng)
        self.classifier = Conv(c2, num_classes + 1, rng)
        inner = grid * 4
        if image_size % inner:
            raise ValueError(f"image size {image_size} must be a multiple of 4 * grid ({inner})")
        self.final_factor = image_size // inner

    def __call__(self, v_pth) -> Tensor:
        """v_pth: (N, P, D) tokens (numpy or Tensor) -> logits (N, C+1, H, W)."""
        x = v_pth if isinstance(v_pth, Tensor) else Tensor(np.asarray(v_pth, dtype=np.float64))
        n, p, _ = x.shape
        if p != self.grid * self.grid:
            raise ValueError(f"decoder expects {self.grid ** 2} patches, got {p}")
        x = self.reduce(x).reshape(n, self.grid, self.grid, -1).transpose(0, 3, 1, 2)
        x = relu(self.up1(upsample_nearest(x, 2)))
        x = relu(self.up2(upsample_nearest(x, 2)))
        x = self.classifier(x)
        if self.final_factor > 1:
            x = upsample_nearest(x, self.final_factor)
        return x


def decoder_loss(logits: Tensor, masks: np.ndarray) -> Tensor | None:
    """Pixel cross-entropy ignoring 255; None when nothing is supervised."""
    return pixel_cross_entropy(logits, masks, ignore_index=IGNORE)


# -- dense CRF ------------------------------------------------------------------------------


def _pairwise_kernel(frame: np.ndarray, cfg: SegmenterConfig) -> np.ndarray:
    _, h, w = frame.shape
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    rgb = frame.reshape(frame.shape[0], -1).T
    d_pos = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    d_rgb = ((rgb[:, None, :] - rgb[None, :, :]) ** 2).sum(-1)
    k = cfg.crf_spatial_weight * np.exp(-d_pos / (2 * cfg.crf_spatial_sigma ** 2))
    k += cfg.crf_bilateral_weight * np.exp(-d_pos / (2 * cfg.crf_bilateral_sigma_xy ** 2)
                                           - d_rgb / (2 * cfg.crf_bilateral_sigma_rgb ** 2))
    np.fill_diagonal(k, 0.0)
    return k


def crf_refine(frame: np.ndarray, prob_map: np.ndarray, cfg: SegmenterConfig, iters: int | None = None) -> np.ndarray:
    """Fully connected mean-field with Potts compatibility; exact O(N^2) message passing.

    frame (3, H, W) in [0, 1]; prob_map (K, H, W) summing to one per pixel.
    """
    iters = cfg.crf_iters if iters is None else iters
    if iters < 0:
        raise ValueError("iters must be >= 0")
    prob = np.asarray(prob_map, dtype=np.float64)
    if np.any(np.abs(prob.sum(axis=0) - 1.0) > ROW_SUM_TOL) or np.any(prob < 0):
        raise ValueError("prob_map is not a per-pixel distribution")
    if iters == 0:
        return prob_map.copy()
    frame = np.asarray(frame, dtype=np.float64)
    k_, h, w = prob.shape
    if frame.shape[1:] != (h, w):
        raise ValueError(f"frame {frame.shape} and prob_map {prob.shape} differ in size")
    kernel = _pairwise_kernel(frame, cfg)
    unary = np.log(np.maximum(prob.reshape(k_, -1), 1e-12))
    q = prob.reshape(k_, -1)
    for _ in range(iters):
        # Potts: the penalty sum_{l' != l} m_l' equals (sum m) - m_l; the constant cancels in the softmax.
        msg = q @ kernel
        z = unary + msg
        z -= z.max(axis=0, keepdims=True)
        q = np.exp(z)
        q /= q.sum(axis=0, keepdims=True)
    return q.reshape(k_, h, w)


# -- inference ---------------------------------------------------------------------------------


def predict_probs(encoders, decoder: MaskDecoder, frames: np.ndarray) -> np.ndarray:
    """frames (T, 3, H, W) -> per-pixel class probabilities (T, C+1, H, W)."""
    with no_grad():
        _, _, v_pth = encoders.forward_visual(frames)
        return softmax(decoder(v_pth).transpose(0, 2, 3, 1)).data.transpose(0, 3, 1, 2)


def infer_masks(encoders, decoder: MaskDecoder, frames: np.ndarray, cfg: SegmenterConfig,
                use_crf: bool = False) -> np.ndarray:
    """(T, 3, H, W) frames -> (T, H, W) uint8 masks."""
    frames = np.asarray(frames, dtype=np.float64)
    if decoder.image_size != frames.shape[-1] or encoders.cfg.num_classes != decoder.num_classes:
        raise ValueError("checkpoint decoder does not match clip or encoder configuration")
    probs = predict_probs(encoders, decoder, frames)
    if use_crf:
        probs = np.stack([crf_refine(f, p, cfg) for f, p in zip(frames, probs)])
    return np.argmax(probs, axis=1).astype(np.uint8)
