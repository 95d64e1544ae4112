"""Visual and audio transformer encoders with temporal visual prompting.

The visual encoder is a small pre-norm ViT.  The audio encoder runs once per
video frame over that frame's log-mel block; with prompting enabled the
frame's pooled visual token, passed through a learned bridge map, is prepended
to the audio token sequence.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autograd import LayerNorm, Linear, MLP, Module, Tensor, concat, param, softmax
from .autograd.tensor import ShapeError


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 3
    fbank_bins: int = 64
    fbank_frames_per_video_frame: int = 16
    audio_patch: tuple[int, int] = (4, 16)
    fbank_mean: float = -12.0
    fbank_std: float = 8.0

    def __post_init__(self):
        self.audio_patch = tuple(self.audio_patch)
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        pt, pf = self.audio_patch
        if self.fbank_frames_per_video_frame % pt or self.fbank_bins % pf:
            raise ValueError(f"fbank block {self.fbank_frames_per_video_frame}x{self.fbank_bins} "
                             f"not divisible by audio patch {self.audio_patch}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def num_audio_patches(self) -> int:
        pt, pf = self.audio_patch
        return (self.fbank_frames_per_video_frame // pt) * (self.fbank_bins // pf)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["audio_patch"] = list(self.audio_patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class EncoderOutputs:
    """Per-frame tokens for a batch of clips; leading dims are (B, T)."""

    v_cls: Tensor
    v_sem: Tensor
    v_pth: Tensor
    a_sem: Tensor
    audio_logits: Tensor
    video_logits: Tensor


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (..., C, H, W) images into (..., N, C*P*P) flattened patches, row-major over the grid."""
    images = np.asarray(images, dtype=np.float64)
    *lead, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, c, gh, p, gw, p)
    nl = len(lead)
    order = tuple(range(nl)) + (nl + 1, nl + 3, nl, nl + 2, nl + 4)
    return x.transpose(order).reshape(*lead, gh * gw, c * p * p)


def audio_patchify(fbank_block: np.ndarray, patch: tuple[int, int]) -> np.ndarray:
    """Split (..., T_f, F) log-mel blocks into (..., M, pt*pf) patches."""
    fbank_block = np.asarray(fbank_block, dtype=np.float64)
    *lead, tf, nf = fbank_block.shape
    pt, pf = patch
    if tf % pt or nf % pf:
        raise ShapeError(f"fbank block {tf}x{nf} not divisible by {patch}")
    x = fbank_block.reshape(*lead, tf // pt, pt, nf // pf, pf)
    nl = len(lead)
    order = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    return x.transpose(order).reshape(*lead, (tf // pt) * (nf // pf), pt * pf)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)))
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class Block(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Transformer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.blocks = [Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng) for _ in range(cfg.num_layers)]
        self.norm = LayerNorm(cfg.embed_dim)

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class VisualEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = Linear(3 * cfg.patch_size ** 2, d, rng)
        self.pos_row = param(rng.normal(0.0, 0.02, size=(cfg.grid, 1, d)))
        self.pos_col = param(rng.normal(0.0, 0.02, size=(1, cfg.grid, d)))
        self.cls_token = param(rng.normal(0.0, 0.02, size=(1, 1, d)))
        self.encoder = Transformer(cfg, rng)

    def __call__(self, frames: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """frames: (N, 3, H, W) -> v_cls (N, D), v_sem (N, D), v_pth (N, P, D)."""
        frames = np.asarray(frames, dtype=np.float64)
        cfg = self.cfg
        if frames.ndim != 4 or frames.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ShapeError(f"expected frames (N, 3, {cfg.image_size}, {cfg.image_size}), got {frames.shape}")
        n = frames.shape[0]
        d = cfg.embed_dim
        tokens = self.patch_embed(Tensor(patchify(frames, cfg.patch_size)))
        pos = (self.pos_row + self.pos_col).reshape(1, cfg.num_patches, d)
        tokens = tokens + pos
        cls = self.cls_token + Tensor(np.zeros((n, 1, d)))
        x = self.encoder(concat([cls, tokens], axis=1))
        v_cls = x[:, 0]
        v_pth = x[:, 1:]
        return v_cls, v_pth.mean(axis=1), v_pth


class AudioEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        pt, pf = cfg.audio_patch
        self.patch_embed = Linear(pt * pf, d, rng)
        self.pos = param(rng.normal(0.0, 0.02, size=(1, cfg.num_audio_patches, d)))
        self.prompt_pos = param(rng.normal(0.0, 0.02, size=(1, 1, d)))
        self.encoder = Transformer(cfg, rng)

    def embed(self, fbank_blocks: np.ndarray) -> Tensor:
        cfg = self.cfg
        fbank_blocks = np.asarray(fbank_blocks, dtype=np.float64)
        expected = (cfg.fbank_frames_per_video_frame, cfg.fbank_bins)
        if fbank_blocks.ndim != 3 or fbank_blocks.shape[1:] != expected:
            raise ShapeError(f"expected fbank slices (N, {expected[0]}, {expected[1]}), got {fbank_blocks.shape}")
        normed = (fbank_blocks - cfg.fbank_mean) / cfg.fbank_std
        return self.patch_embed(Tensor(audio_patchify(normed, cfg.audio_patch))) + self.pos

    def __call__(self, fbank_blocks: np.ndarray, prompt: Tensor | None = None) -> Tensor:
        """fbank_blocks: (N, T_f, F); prompt: (N, D) or None -> a_sem (N, D)."""
        tokens = self.embed(fbank_blocks)
        if prompt is not None:
            n, d = prompt.shape
            if n != tokens.shape[0] or d != self.cfg.embed_dim:
                raise ShapeError(f"prompt shape {prompt.shape} does not match audio tokens {tokens.shape}")
            tokens = insert_prompt(tokens, prompt.reshape(n, 1, d) + self.prompt_pos)
        x = self.encoder(tokens)
        start = 1 if prompt is not None else 0
        return x[:, start:].mean(axis=1)

    def pool_indices(self, with_prompt: bool) -> np.ndarray:
        start = 1 if with_prompt else 0
        return np.arange(start, start + self.cfg.num_audio_patches)


def insert_prompt(audio_tokens: Tensor, prompt: Tensor) -> Tensor:
    """Place the prompt at position 0 of each audio sequence: (N, M, D) + (N, 1, D) -> (N, M+1, D)."""
    if prompt.ndim != 3 or prompt.shape[1] != 1 or prompt.shape[2] != audio_tokens.shape[2]:
        raise ShapeError(f"prompt {prompt.shape} incompatible with audio tokens {audio_tokens.shape}")
    return concat([prompt, audio_tokens], axis=1)


class PCASEncoders(Module):
    """Visual encoder, prompted audio encoder, prompt bridge and both classification heads."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, tvp: bool = True):
        self.cfg = cfg
        self.tvp = tvp
        self.visual = VisualEncoder(cfg, rng)
        self.audio = AudioEncoder(cfg, rng)
        self.bridge = Linear(cfg.embed_dim, cfg.embed_dim, rng)
        self.video_head = Linear(cfg.embed_dim, cfg.num_classes, rng)
        self.audio_head = Linear(cfg.embed_dim, cfg.num_classes, rng)

    def classify_video(self, v_cls: Tensor) -> Tensor:
        return self.video_head(v_cls)

    def classify_frame_audio(self, a_sem: Tensor) -> Tensor:
        return self.audio_head(a_sem)

    def forward_visual(self, frames: np.ndarray):
        return self.visual(frames)

    def __call__(self, frames: np.ndarray, fbank: np.ndarray) -> EncoderOutputs:
        """frames: (B, T, 3, H, W); fbank: (B, T * fbank_frames_per_video_frame, F)."""
        cfg = self.cfg
        frames = np.asarray(frames, dtype=np.float64)
        fbank = np.asarray(fbank, dtype=np.float64)
        b, t = frames.shape[:2]
        per = cfg.fbank_frames_per_video_frame
        if fbank.shape != (b, t * per, cfg.fbank_bins):
            raise ShapeError(f"fbank {fbank.shape} does not match {t} frames of {per}x{cfg.fbank_bins}")
        v_cls, v_sem, v_pth = self.visual(frames.reshape(b * t, *frames.shape[2:]))
        prompt = self.bridge(v_sem) if self.tvp else None
        a_sem = self.audio(fbank.reshape(b * t, per, cfg.fbank_bins), prompt)
        d = cfg.embed_dim
        return EncoderOutputs(
            v_cls=v_cls.reshape(b, t, d),
            v_sem=v_sem.reshape(b, t, d),
            v_pth=v_pth.reshape(b, t, cfg.num_patches, d),
            a_sem=a_sem.reshape(b, t, d),
            audio_logits=self.classify_frame_audio(a_sem).reshape(b, t, cfg.num_classes),
            video_logits=self.classify_video(v_cls).reshape(b, t, cfg.num_classes),
        )
