"""Evaluation: the only code path that reads ground-truth masks."""

from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..autograd import no_grad
from ..avsynth import DatasetManifest, GenConfig
from ..avsynth.dataset import load_clip
from ..avsynth.io import read_pgm
from ..segmenter import infer_masks
from .config import RunConfig
from .metrics import confusion_matrix, fscore_from_confusion, frame_audio_accuracy, iou_from_confusion
from .train import PCASModel, load_model


class MissingMasksError(FileNotFoundError):
    pass


@dataclass
class EvalClip:
    name: str
    frames: np.ndarray     # (T, 3, H, W)
    fbank: np.ndarray
    labels: tuple[int, ...]
    masks: np.ndarray      # (T, H, W) uint8
    active: np.ndarray     # (T, C) bool, per-frame sounding classes


def load_eval_split(root: Path, split: str) -> tuple[list[EvalClip], DatasetManifest]:
    root = Path(root)
    manifest = DatasetManifest.load(root)
    fbank_cfg = GenConfig.from_dict(manifest.gen_config).fbank
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split '{split}' is empty in {root}")
    clips = []
    for rec in records:
        d = root / rec["directory"]
        t = rec["frames"]
        mask_paths = [d / "gt_masks" / f"{i:03d}.pgm" for i in range(t)]
        missing = [p for p in mask_paths if not p.exists()]
        if missing:
            raise MissingMasksError(f"evaluation needs ground-truth masks but {missing[0]} is missing "
                                    f"({len(missing)} of {t} masks absent for {rec['directory']})")
        base = load_clip(root, rec, manifest.classes, fbank_cfg)
        sched_path = d / "schedule.json"
        if not sched_path.exists():
            raise MissingMasksError(f"{sched_path} is missing; frame-level audio truth is unavailable")
        active = np.zeros((t, manifest.num_classes), dtype=bool)
        for i, names in enumerate(json.loads(sched_path.read_text())["active"]):
            for n in names:
                active[i, manifest.classes.index(n)] = True
        clips.append(EvalClip(base.name, base.frames, base.fbank, base.labels,
                              np.stack([read_pgm(p) for p in mask_paths]), active))
    return clips, manifest


def revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except OSError:
        pass
    return __version__


@dataclass
class MetricsReport:
    per_class_iou: dict[str, float]
    miou: float
    per_class_f: dict[str, float]
    mean_f: float
    frame_audio_accuracy: float
    split: str
    num_frames: int
    crf: bool
    include_background: bool
    beta2: float
    config_hash: str
    seed: int
    revision: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate_model(model: PCASModel, cfg: RunConfig, clips: list[EvalClip], classes: list[str], split: str,
                   use_crf: bool | None = None, include_background: bool = True, beta2: float = 0.3) -> MetricsReport:
    use_crf = cfg.crf if use_crf is None else use_crf
    k = len(classes) + 1
    cm = np.zeros((k, k), dtype=np.int64)
    logits, truth = [], []
    for clip in clips:
        pred = infer_masks(model.enc, model.dec, clip.frames, cfg.segmenter, use_crf=use_crf)
        cm += confusion_matrix(pred, clip.masks, k)
        with no_grad():
            out = model.enc(clip.frames[None], clip.fbank[None])
        logits.append(out.audio_logits.data[0])
        truth.append(clip.active)
    names = ["background"] + list(classes)
    per_iou, m_iou = iou_from_confusion(cm, include_background)
    per_f, m_f = fscore_from_confusion(cm, beta2)
    acc = frame_audio_accuracy(np.concatenate(logits), np.concatenate(truth))
    return MetricsReport(
        per_class_iou={names[c]: v for c, v in per_iou.items()}, miou=m_iou,
        per_class_f={names[c]: v for c, v in per_f.items()}, mean_f=m_f,
        frame_audio_accuracy=acc, split=split, num_frames=int(sum(len(c.masks) for c in clips)),
        crf=bool(use_crf), include_background=include_background, beta2=beta2,
        config_hash=cfg.hash(), seed=cfg.seed, revision=revision(),
    )


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def evaluate(ckpt: Path, data: Path, split: str = "test", use_crf: bool | None = None,
             include_background: bool = True, beta2: float = 0.3) -> MetricsReport:
    """Load a checkpoint (read-only) and score it on ``split``."""
    before = file_digest(ckpt)
    model, cfg, _, _ = load_model(ckpt)
    clips, manifest = load_eval_split(data, split)
    if manifest.num_classes != cfg.encoder.num_classes:
        raise ValueError(f"checkpoint has {cfg.encoder.num_classes} classes, dataset has {manifest.num_classes}")
    report = evaluate_model(model, cfg, clips, manifest.classes, split, use_crf, include_background, beta2)
    if file_digest(ckpt) != before:
        raise RuntimeError("checkpoint changed during evaluation")
    return report
