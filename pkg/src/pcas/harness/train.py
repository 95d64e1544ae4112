"""Training loop: warm-up on classification + CMC, then the full contrastive stack and the decoder."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..alignment import (
    NonFiniteLossError,
    cmc_loss,
    cmcc_batch,
    cmpc_loss,
    crop_polarity,
    label_consistency,
    make_crops,
    patch_contrast_labels,
    total_loss,
)
from ..autograd import Adam, Module, Tensor, bce_with_logits, no_grad
from ..avsynth import DatasetManifest, TrainClip, load_split
from ..encoders import PCASEncoders
from ..segmenter import MaskDecoder, clip_pseudo_masks, decoder_loss, upsample_labels
from . import checkpoint
from .config import RunConfig

log = logging.getLogger(__name__)

# independent RNG streams; results never depend on how many draws another stream made
STREAM_INIT, STREAM_SHUFFLE, STREAM_CROPS = 0, 1, 2


class TrainingAborted(RuntimeError):
    pass


class DatasetMismatchError(ValueError):
    pass


class PCASModel(Module):
    def __init__(self, cfg: RunConfig):
        rng = np.random.default_rng([cfg.seed, STREAM_INIT])
        e = cfg.encoder
        self.enc = PCASEncoders(e, rng, tvp=cfg.tvp)
        self.dec = MaskDecoder(e.embed_dim, e.num_classes, e.grid, e.image_size,
                               cfg.segmenter.decoder_channels, rng)

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """encoders + heads -> main; decoder + prompt bridge -> aux."""
        groups = {"main": [], "aux": []}
        for name, p in self.named_parameters():
            aux = name.startswith(("dec.", "enc.bridge.")) or name == "enc.audio.prompt_pos"
            groups["aux" if aux else "main"].append((name, p))
        return groups


def rng_for(cfg: RunConfig, stream: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream, epoch])


def multi_hot(labels, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes)
    y[np.asarray(labels, dtype=np.int64) - 1] = 1.0
    return y


def fbank_stats(clips: list[TrainClip]) -> tuple[float, float]:
    values = np.concatenate([c.fbank.ravel() for c in clips])
    return float(values.mean()), float(values.std())


def prepare_config(cfg: RunConfig, manifest: DatasetManifest, clips: list[TrainClip]) -> RunConfig:
    """Fill data-derived encoder fields (class count, fbank normalization) and check dimensions."""
    d = cfg.to_dict()
    mean, std = fbank_stats(clips)
    d["encoder"].update(num_classes=manifest.num_classes, fbank_mean=mean, fbank_std=std)
    out = RunConfig.from_dict(d)
    sample = clips[0]
    e = out.encoder
    if sample.frames.shape[1:] != (3, e.image_size, e.image_size):
        raise DatasetMismatchError(f"frames {sample.frames.shape[1:]} do not match image_size {e.image_size}")
    if sample.fbank.shape[1] != e.fbank_bins or sample.fbank.shape[0] % e.fbank_frames_per_video_frame:
        raise DatasetMismatchError(f"fbank {sample.fbank.shape} does not match the encoder configuration")
    return out


@dataclass
class StepResult:
    total: float
    terms: dict[str, float]
    decoder: float | None
    cmcc_no_positive: int = 0


@dataclass
class TrainState:
    epoch: int = 0          # number of completed epochs
    step: int = 0
    skipped_decoder_steps: int = 0
    history: list[dict] = field(default_factory=list)


def compute_pseudo_masks(model: PCASModel, clips: list[TrainClip], cfg: RunConfig, batch: int = 8) -> dict[str, np.ndarray]:
    """Grid-level (T, g, g) pseudo labels per clip; upsampled when a step consumes them."""
    head_w = model.enc.video_head.weight.data.T
    out = {}
    with no_grad():
        for i in range(0, len(clips), batch):
            chunk = clips[i:i + batch]
            outs = model.enc(np.stack([c.frames for c in chunk]), np.stack([c.fbank for c in chunk]))
            for j, clip in enumerate(chunk):
                out[clip.name] = clip_pseudo_masks(outs.v_pth.data[j], outs.audio_logits.data[j], head_w,
                                                   clip.labels, cfg.segmenter)
    return out


def cmcc_term(model: PCASModel, frames: np.ndarray, v_cls: Tensor, patch_labels: np.ndarray, cfg: RunConfig,
              rng: np.random.Generator) -> tuple[Tensor | None, int]:
    """Anchor frames per clip, K crops each, polarity from the anchor's patch labels."""
    a = cfg.alignment
    b, t = frames.shape[:2]
    g = cfg.encoder.grid
    per = min(a.cmcc_frames_per_clip, t)
    anchors = [(i, int(f)) for i in range(b) for f in np.sort(rng.choice(t, size=per, replace=False))]
    crops, positive = [], np.zeros((len(anchors), a.k_crops), dtype=bool)
    for n, (i, f) in enumerate(anchors):
        boxes, imgs = make_crops(frames[i, f], a.k_crops, a.crop_scale, rng)
        grid = patch_labels[i, f].reshape(g, g)
        positive[n] = [crop_polarity(box, grid, a.rho) for box in boxes]
        crops.append(imgs)
    if not positive.any():
        return None, len(anchors)
    crop_cls, _, _ = model.enc.forward_visual(np.concatenate(crops))
    d = cfg.encoder.embed_dim
    idx = np.array([i * t + f for i, f in anchors])
    anchor_tokens = v_cls.reshape(b * t, d)[idx]
    loss, stats = cmcc_batch(anchor_tokens, crop_cls.reshape(len(anchors), a.k_crops, d), positive, a.tau, a.eps)
    return loss, stats.no_positive


def train_step(model: PCASModel, opt: Adam, batch: list[TrainClip], cfg: RunConfig, warm: bool,
               pseudo: dict[str, np.ndarray] | None, crop_rng: np.random.Generator, progress: float) -> StepResult:
    e, a = cfg.encoder, cfg.alignment
    frames = np.stack([c.frames for c in batch])
    fbank = np.stack([c.fbank for c in batch])
    b, t = frames.shape[:2]
    n = b * t
    outs = model.enc(frames, fbank)
    y = np.stack([multi_hot(c.labels, e.num_classes) for c in batch])
    y = np.repeat(y[:, None, :], t, axis=1)
    terms: dict[str, Tensor | None] = {
        "cls": bce_with_logits(outs.video_logits, y) + bce_with_logits(outs.audio_logits, y),
    }
    d = e.embed_dim
    if cfg.vsem_cls:
        # the same head on the pooled patch token, so head-weight CAMs decompose a trained logit
        terms["cls"] = terms["cls"] + bce_with_logits(model.enc.classify_video(outs.v_sem), y)
    if cfg.cmc:
        consistency = label_consistency([c.labels for c in batch for _ in range(t)])
        terms["cmc"] = cmc_loss(outs.a_sem.reshape(n, d), outs.v_sem.reshape(n, d), outs.v_cls.reshape(n, d),
                                consistency, a.tau_cmc)
    no_pos = 0
    if not warm and (cfg.cmpc or cfg.cmcc):
        pos, neg = a.thresholds(progress)
        labels = patch_contrast_labels(outs.v_pth.data, outs.a_sem.data, pos, neg, a.score_mode).labels
        if cfg.cmpc:
            terms["cmpc"] = cmpc_loss(outs.v_pth.reshape(n, e.num_patches, d), labels.reshape(n, e.num_patches))
        if cfg.cmcc:
            terms["cmcc"], no_pos = cmcc_term(model, frames, outs.v_cls, labels, cfg, crop_rng)
    breakdown = total_loss(terms, a, cfg.enabled_terms)
    loss = breakdown.total
    dec_value = None
    if not warm and pseudo is not None:
        masks = upsample_labels(np.concatenate([pseudo[c.name] for c in batch]), e.image_size)
        dl = decoder_loss(model.dec(outs.v_pth.data.reshape(n, e.num_patches, d)), masks)
        if dl is not None:
            dec_value = dl.item()
            if not np.isfinite(dec_value):
                raise NonFiniteLossError(f"decoder loss is not finite: {dec_value}")
            loss = loss + dl
    opt.zero_grad()
    if loss.requires_grad:
        loss.backward()
    opt.step()
    return StepResult(total=float(loss.item()), terms=breakdown.terms, decoder=dec_value, cmcc_no_positive=no_pos)


def make_optimizer(model: PCASModel, cfg: RunConfig) -> Adam:
    return Adam(model.param_groups(), {"main": cfg.lr_main, "aux": cfg.lr_aux}, betas=(cfg.beta1, cfg.beta2))


def needs_refresh(cfg: RunConfig, epoch: int, have: bool) -> bool:
    if epoch < cfg.warmup_epochs:
        return False
    if not have:
        return True
    return cfg.pseudo_refresh_epochs > 0 and (epoch - cfg.warmup_epochs) % cfg.pseudo_refresh_epochs == 0


def save_checkpoint(path: Path, model: PCASModel, opt: Adam, cfg: RunConfig, state: TrainState,
                    pseudo: dict[str, np.ndarray] | None = None) -> None:
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    arrays.update(opt.state_arrays())
    # pseudo labels travel with the checkpoint so a resumed run sees the same targets
    arrays.update({f"pseudo.{name}": m for name, m in (pseudo or {}).items()})
    meta = {"epoch": state.epoch, "step": state.step, "adam_steps": opt.step_count,
            "skipped_decoder_steps": state.skipped_decoder_steps}
    checkpoint.save(path, arrays, cfg.to_dict(), meta)


def load_model(path: Path) -> tuple[PCASModel, RunConfig, dict, dict[str, np.ndarray]]:
    arrays, config, meta = checkpoint.load(path)
    cfg = RunConfig.from_dict(config)
    model = PCASModel(cfg)
    model.load_state_dict({k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
    return model, cfg, meta, arrays


def train(cfg: RunConfig, data: Path, out: Path, resume: Path | None = None,
          max_epochs: int | None = None) -> TrainState:
    """Train on the dataset's train split; writes per-epoch checkpoints and a JSONL loss log to ``out``.

    ``max_epochs`` stops early (after that many completed epochs) without changing the schedule.
    """
    data, out = Path(data), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(data)
    clips = load_split(data, "train", manifest)
    if len(clips) < 2:
        raise DatasetMismatchError("need at least two training clips")
    if resume is not None:
        model, cfg, meta, arrays = load_model(resume)
        if cfg.encoder.num_classes != manifest.num_classes:
            raise DatasetMismatchError("checkpoint class count differs from the dataset")
        opt = make_optimizer(model, cfg)
        opt.load_state_arrays(arrays, meta["adam_steps"])
        state = TrainState(epoch=meta["epoch"], step=meta["step"], skipped_decoder_steps=meta["skipped_decoder_steps"])
        stored = {k[len("pseudo."):]: v.astype(np.uint8) for k, v in arrays.items() if k.startswith("pseudo.")}
    else:
        cfg = prepare_config(cfg, manifest, clips)
        model = PCASModel(cfg)
        opt = make_optimizer(model, cfg)
        state = TrainState()
        stored = {}
    (out / "config.json").write_text(cfg.to_json())
    log_path = out / "losses.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()
    last_good = out / "last.ckpt"
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    steps_per_epoch = (len(clips) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * max(1, cfg.epochs - cfg.warmup_epochs)
    pseudo = stored or None
    while state.epoch < stop:
        epoch = state.epoch
        warm = epoch < cfg.warmup_epochs
        if needs_refresh(cfg, epoch, pseudo is not None):
            pseudo = compute_pseudo_masks(model, clips, cfg)
        order = rng_for(cfg, STREAM_SHUFFLE, epoch).permutation(len(clips))
        crop_rng = rng_for(cfg, STREAM_CROPS, epoch)
        with log_path.open("a") as fh:
            for s in range(steps_per_epoch):
                batch = [clips[i] for i in order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
                if len(batch) < 2:
                    continue
                done = max(0, state.step - steps_per_epoch * cfg.warmup_epochs)
                try:
                    res = train_step(model, opt, batch, cfg, warm, pseudo, crop_rng, min(1.0, done / total_steps))
                except (NonFiniteLossError, FloatingPointError) as exc:
                    raise TrainingAborted(f"epoch {epoch} step {state.step}: {exc}; last good checkpoint: "
                                          f"{last_good if last_good.exists() else 'none'}") from exc
                if not warm and res.decoder is None:
                    state.skipped_decoder_steps += 1
                    log.info("decoder step skipped (all pseudo labels ignored)")
                record = {"epoch": epoch, "step": state.step, "total": res.total, **res.terms,
                          "decoder": res.decoder, "cmcc_no_positive": res.cmcc_no_positive}
                fh.write(json.dumps(record) + "\n")
                state.step += 1
        state.epoch += 1
        save_checkpoint(out / f"epoch_{state.epoch:03d}.ckpt", model, opt, cfg, state, pseudo)
        save_checkpoint(last_good, model, opt, cfg, state, pseudo)
        log.info("epoch %d done (%d steps)", state.epoch, state.step)
    return state


def untrained_model(cfg: RunConfig, data: Path) -> tuple[PCASModel, RunConfig]:
    """Freshly initialized model with data-derived config, for baselines."""
    manifest = DatasetManifest.load(data)
    cfg = prepare_config(cfg, manifest, load_split(data, "train", manifest))
    return PCASModel(cfg), cfg

