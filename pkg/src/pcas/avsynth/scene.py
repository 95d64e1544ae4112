"""Procedural multi-object scenes with sounding-object ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SHAPES = ("circle", "square", "triangle")
PALETTE = np.array([
    [0.90, 0.20, 0.15],
    [0.15, 0.45, 0.95],
    [0.20, 0.80, 0.25],
    [0.95, 0.80, 0.10],
    [0.70, 0.25, 0.85],
    [0.10, 0.85, 0.85],
])
SUPERSAMPLE = 4


class SceneError(ValueError):
    pass


@dataclass
class SceneObject:
    class_id: int
    shape: str
    cx: float
    cy: float
    size: float
    color: tuple[float, float, float]


@dataclass
class SceneSpec:
    """One clip: objects (constant over time) plus a per-frame sounding schedule.

    ``schedule[t, c - 1]`` is True when class ``c`` sounds at frame ``t``.
    Silent objects are drawn with their colour scaled by ``silent_dim``.
    """

    num_classes: int
    objects: list[SceneObject]
    schedule: np.ndarray
    noise_level: float = 0.0
    seed: int = 0
    image_size: int = 32
    silent_dim: float = 0.45
    background: dict = field(default_factory=dict)

    def __post_init__(self):
        self.schedule = np.asarray(self.schedule, dtype=bool)
        if self.schedule.ndim != 2 or self.schedule.shape[1] != self.num_classes:
            raise SceneError(f"schedule must be (T, {self.num_classes}), got {self.schedule.shape}")
        present = {o.class_id for o in self.objects}
        for o in self.objects:
            if not 1 <= o.class_id <= self.num_classes:
                raise SceneError(f"object class {o.class_id} outside [1, {self.num_classes}]")
            if o.shape not in SHAPES:
                raise SceneError(f"unknown shape '{o.shape}'")
            if o.size <= 0:
                raise SceneError("object size must be positive")
        active = set(np.flatnonzero(self.schedule.any(axis=0)) + 1)
        if not active <= present:
            raise SceneError(f"schedule activates classes {sorted(active - present)} with no object in the scene")
        if self.objects and not self.schedule.any():
            raise SceneError("at least one frame must have an active class")

    @property
    def num_frames(self) -> int:
        return self.schedule.shape[0]

    def active_classes(self, t: int) -> set[int]:
        return set((np.flatnonzero(self.schedule[t]) + 1).tolist())

    def clip_labels(self) -> list[int]:
        return sorted((np.flatnonzero(self.schedule.any(axis=0)) + 1).tolist())


def shape_coverage(obj: SceneObject, size: int, ss: int = SUPERSAMPLE) -> np.ndarray:
    """Fractional pixel coverage (H, W) of one shape by ss x ss supersampling."""
    offs = (np.arange(ss) + 0.5) / ss
    coords = (np.arange(size)[:, None] + offs[None, :]).reshape(-1)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    half = obj.size / 2.0
    dx, dy = xx - obj.cx, yy - obj.cy
    if obj.shape == "circle":
        inside = dx * dx + dy * dy <= half * half
    elif obj.shape == "square":
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    else:
        # upward triangle inscribed in the size x size box
        top, bottom = obj.cy - half, obj.cy + half
        frac = (yy - top) / obj.size
        inside = (yy >= top) & (yy <= bottom) & (np.abs(dx) <= frac * half)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _check_bounds(obj: SceneObject, size: int) -> None:
    half = obj.size / 2.0
    if obj.cx - half < 0 or obj.cy - half < 0 or obj.cx + half > size or obj.cy + half > size:
        raise SceneError(f"object of class {obj.class_id} extends outside the {size}x{size} canvas")


def render_background(spec: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    base = rng.uniform(0.35, 0.6, size=3)
    field_ = np.zeros((n, n))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    field_ = 0.05 * field_ / 3.0
    grain = rng.normal(0.0, 0.02, size=(n, n))
    img = base[:, None, None] + field_[None] + grain[None]
    return np.clip(img, 0.0, 1.0)


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render T frames (T, 3, H, W) in [0, 1] and T ground-truth masks (T, H, W) uint8.

    A mask pixel holds the class of the topmost object covering at least half
    of it, provided that class sounds at that frame; otherwise background (0).
    """
    n = spec.image_size
    for obj in spec.objects:
        _check_bounds(obj, n)
    background = render_background(spec)
    coverages = [shape_coverage(obj, n) for obj in spec.objects]
    frames = np.zeros((spec.num_frames, 3, n, n))
    masks = np.zeros((spec.num_frames, n, n), dtype=np.uint8)
    for t in range(spec.num_frames):
        img = background.copy()
        owner = np.zeros((n, n), dtype=np.int64)
        active = spec.active_classes(t)
        for obj, alpha in zip(spec.objects, coverages):
            color = np.asarray(obj.color, dtype=np.float64)
            if obj.class_id not in active:
                color = color * spec.silent_dim
            img = alpha[None] * color[:, None, None] + (1.0 - alpha[None]) * img
            owner = np.where(alpha >= 0.5, obj.class_id, owner)
        frames[t] = np.clip(img, 0.0, 1.0)
        sounding = np.isin(owner, list(active)) if active else np.zeros_like(owner, dtype=bool)
        masks[t] = np.where(sounding, owner, 0).astype(np.uint8)
    return frames, masks
