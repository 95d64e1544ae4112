"""On-disk synthetic audio-visual dataset: generation and the mask-free training loader."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .audio import FbankConfig, compute_fbank, synth_audio
from .io import read_ppm, read_wav, write_pgm, write_ppm, write_wav
from .scene import PALETTE, SHAPES, SceneObject, SceneSpec, render_scene

log = logging.getLogger(__name__)

CLASS_NAMES = ("guitar", "dog", "siren", "piano", "bird", "drum")
SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def child_seed(master: int, index: int) -> int:
    """Per-sample seed depending only on (master, index), so generation order does not matter."""
    return splitmix64(splitmix64(master & _MASK64) ^ (index & _MASK64))


class DatasetExistsError(FileExistsError):
    pass


@dataclass
class GenConfig:
    image_size: int = 32
    num_frames: int = 5
    noise_level: float = 0.08
    tone_gain: float = 0.02
    p_active: float = 0.8
    multi_source_ratio: float = 0.4
    distractor_prob: float = 0.2
    silent_dim: float = 0.45
    min_size: float = 10.0
    max_size: float = 16.0
    split_ratios: tuple[float, float, float] = (0.75, 0.125, 0.125)
    fbank: FbankConfig = field(default_factory=FbankConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GenConfig:
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if isinstance(kw.get("fbank"), dict):
            kw["fbank"] = FbankConfig(**kw["fbank"])
        if "split_ratios" in kw:
            kw["split_ratios"] = tuple(kw["split_ratios"])
        return cls(**kw)


@dataclass
class DatasetManifest:
    classes: list[str]
    samples: list[dict]
    seed: int = 0
    gen_config: dict = field(default_factory=dict)
    format: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, root: Path) -> DatasetManifest:
        path = Path(root) / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; is this a generated dataset?")
        d = json.loads(path.read_text())
        return cls(**d)

    def split(self, name: str) -> list[dict]:
        return [s for s in self.samples if s["split"] == name]

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def split_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    return n_train, n_val, n - n_train - n_val


def _place(rng: np.random.Generator, cfg: GenConfig, placed: list[tuple[float, float, float]]):
    n = cfg.image_size
    best = None
    for _ in range(20):
        size = rng.uniform(cfg.min_size, cfg.max_size)
        half = size / 2
        cx, cy = rng.uniform(half, n - half, size=2)
        overlap = sum(max(0.0, (s + size) / 2 - np.hypot(cx - x, cy - y)) for x, y, s in placed)
        if best is None or overlap < best[0]:
            best = (overlap, cx, cy, size)
        if overlap == 0:
            break
    return best[1:]


def sample_scene(index: int, num_classes: int, seed: int, cfg: GenConfig) -> SceneSpec:
    """Scene for one sample; the primary class cycles with ``index`` so classes stay balanced."""
    rng = np.random.default_rng(seed)
    t = cfg.num_frames
    primary = index % num_classes + 1
    classes = [primary]
    if num_classes > 1 and rng.uniform() < cfg.multi_source_ratio:
        others = [c for c in range(1, num_classes + 1) if c != primary]
        classes.append(int(rng.choice(others)))
    schedule = np.zeros((t, num_classes), dtype=bool)
    for c in classes:
        schedule[:, c - 1] = rng.uniform(size=t) < cfg.p_active
        if not schedule[:, c - 1].any():
            schedule[rng.integers(t), c - 1] = True
    if len(classes) == 2:
        a, b = classes[0] - 1, classes[1] - 1
        if not (schedule[:, a] & schedule[:, b]).any():
            k = rng.integers(t)
            schedule[k, a] = schedule[k, b] = True
    scene_classes = list(classes)
    spare = [c for c in range(1, num_classes + 1) if c not in classes]
    if spare and rng.uniform() < cfg.distractor_prob:
        scene_classes.insert(0, int(rng.choice(spare)))
    objects, placed = [], []
    for c in scene_classes:
        cx, cy, size = _place(rng, cfg, placed)
        placed.append((cx, cy, size))
        color = np.clip(PALETTE[(c - 1) % len(PALETTE)] + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        objects.append(SceneObject(c, SHAPES[(c - 1) % len(SHAPES)], float(cx), float(cy), float(size),
                                   tuple(float(v) for v in color)))
    return SceneSpec(num_classes=num_classes, objects=objects, schedule=schedule, noise_level=cfg.noise_level,
                     seed=seed, image_size=cfg.image_size, silent_dim=cfg.silent_dim)


def write_sample(directory: Path, spec: SceneSpec, names: list[str], cfg: GenConfig) -> None:
    frames, masks = render_scene(spec)
    wave = synth_audio(spec.schedule, cfg.fbank.frame_seconds, cfg.fbank.sample_rate, seed=spec.seed,
                       noise_level=spec.noise_level, gain=cfg.tone_gain)
    (directory / "frames").mkdir(parents=True)
    (directory / "gt_masks").mkdir()
    for t in range(spec.num_frames):
        write_ppm(directory / "frames" / f"{t:03d}.ppm", frames[t])
        write_pgm(directory / "gt_masks" / f"{t:03d}.pgm", masks[t])
    write_wav(directory / "audio.wav", wave, cfg.fbank.sample_rate)
    labels = [names[c - 1] for c in spec.clip_labels()]
    (directory / "labels.json").write_text(json.dumps(labels) + "\n")
    active = [[names[c - 1] for c in sorted(spec.active_classes(t))] for t in range(spec.num_frames)]
    (directory / "schedule.json").write_text(json.dumps({"active": active}) + "\n")


def generate_dataset(out: Path, n_samples: int, num_classes: int, seed: int, cfg: GenConfig | None = None,
                     force: bool = False) -> DatasetManifest:
    cfg = cfg or GenConfig()
    out = Path(out)
    if not 1 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must lie in [1, {len(CLASS_NAMES)}]")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DatasetExistsError(f"{out} is not empty (pass force to overwrite)")
        import shutil
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    names = list(CLASS_NAMES[:num_classes])
    sizes = split_sizes(n_samples, cfg.split_ratios)
    samples = []
    index = 0
    for split, count in zip(SPLITS, sizes):
        for local in range(count):
            spec = sample_scene(index, num_classes, child_seed(seed, index), cfg)
            rel = f"{split}/sample_{local:05d}"
            write_sample(out / rel, spec, names, cfg)
            samples.append({"directory": rel, "split": split, "frames": spec.num_frames,
                            "labels": [names[c - 1] for c in spec.clip_labels()]})
            index += 1
    manifest = DatasetManifest(classes=names, samples=samples, seed=seed, gen_config=cfg.to_dict())
    (out / "manifest.json").write_text(manifest.to_json())
    log.info("wrote %d samples to %s", len(samples), out)
    return manifest


@dataclass
class TrainClip:
    """Training-path view of a sample: frames, audio features and the clip label set only."""

    name: str
    frames: np.ndarray       # (T, 3, H, W)
    fbank: np.ndarray        # (T * rows_per_frame, n_mels)
    labels: tuple[int, ...]  # class ids in [1, num_classes]


def load_clip(root: Path, record: dict, classes: list[str], fbank_cfg: FbankConfig) -> TrainClip:
    directory = Path(root) / record["directory"]
    t = record["frames"]
    frames = np.stack([read_ppm(directory / "frames" / f"{i:03d}.ppm") for i in range(t)])
    wave, rate = read_wav(directory / "audio.wav")
    if rate != fbank_cfg.sample_rate:
        raise ValueError(f"{directory}: sample rate {rate} != {fbank_cfg.sample_rate}")
    fbank = compute_fbank(wave, t, fbank_cfg).values
    names = json.loads((directory / "labels.json").read_text())
    labels = tuple(sorted(classes.index(n) + 1 for n in names))
    return TrainClip(name=record["directory"], frames=frames, fbank=fbank, labels=labels)


def load_split(root: Path, split: str, manifest: DatasetManifest | None = None) -> list[TrainClip]:
    manifest = manifest or DatasetManifest.load(root)
    fbank_cfg = GenConfig.from_dict(manifest.gen_config).fbank
    return [load_clip(root, rec, manifest.classes, fbank_cfg) for rec in manifest.split(split)]
