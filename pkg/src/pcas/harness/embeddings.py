"""Per-frame token dump (v_cls, v_sem, a_sem) for cluster inspection.

File layout::

    b"PCASEMB\\0" | u32 version | u64 header length | header JSON | rows (<f4) | projection (<f4, optional)

The header lists one entry per row (clip, frame, tag, labels); rows are stored
frame-major with tags in ``TAGS`` order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autograd import no_grad
from ..avsynth import TrainClip

MAGIC = b"PCASEMB\0"
VERSION = 1
TAGS = ("vcls", "vsem", "asem")


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class EmbeddingFile:
    vectors: np.ndarray            # (R, D) float32
    tags: list[str]
    clips: list[str]
    frames: list[int]
    labels: list[list[str]]
    projection: np.ndarray | None  # (R, 2) float32

    def __post_init__(self):
        r = len(self.vectors)
        if not (len(self.tags) == len(self.clips) == len(self.frames) == len(self.labels) == r):
            raise EmbeddingFormatError("row metadata length does not match the vector count")
        if self.projection is not None and self.projection.shape != (r, 2):
            raise EmbeddingFormatError(f"projection shape {self.projection.shape} != ({r}, 2)")

    def rows(self, tag: str) -> np.ndarray:
        return self.vectors[[i for i, t in enumerate(self.tags) if t == tag]]


def principal_projection(x: np.ndarray, k: int = 2) -> np.ndarray:
    """Project centred rows on the top-k right singular vectors (sign fixed by the largest loading)."""
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:k]
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    out = centred @ comps.T
    if out.shape[1] < k:
        out = np.pad(out, ((0, 0), (0, k - out.shape[1])))
    return out


def collect(model, clips: list[TrainClip], classes: list[str], project: bool = True, batch: int = 8) -> EmbeddingFile:
    vecs, tags, names, frames, labels = [], [], [], [], []
    with no_grad():
        for i in range(0, len(clips), batch):
            chunk = clips[i:i + batch]
            out = model.enc(np.stack([c.frames for c in chunk]), np.stack([c.fbank for c in chunk]))
            per_tag = {"vcls": out.v_cls.data, "vsem": out.v_sem.data, "asem": out.a_sem.data}
            for j, clip in enumerate(chunk):
                label_names = [classes[c - 1] for c in clip.labels]
                for t in range(clip.frames.shape[0]):
                    for tag in TAGS:
                        vecs.append(per_tag[tag][j, t])
                        tags.append(tag)
                        names.append(clip.name)
                        frames.append(t)
                        labels.append(label_names)
    x = np.asarray(vecs)
    proj = principal_projection(x).astype(np.float32) if project else None
    return EmbeddingFile(x.astype(np.float32), tags, names, frames, labels, proj)


def encode(emb: EmbeddingFile) -> bytes:
    vectors = np.ascontiguousarray(emb.vectors, dtype="<f4")
    header = {
        "format": VERSION, "rows": int(vectors.shape[0]), "dim": int(vectors.shape[1]),
        "tags": emb.tags, "clips": emb.clips, "frames": [int(f) for f in emb.frames], "labels": emb.labels,
        "projection": emb.projection is not None,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    body = vectors.tobytes()
    if emb.projection is not None:
        body += np.ascontiguousarray(emb.projection, dtype="<f4").tobytes()
    return MAGIC + struct.pack("<IQ", VERSION, len(raw)) + raw + body


def decode(raw: bytes) -> EmbeddingFile:
    if raw[:len(MAGIC)] != MAGIC:
        raise EmbeddingFormatError("not an embedding file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != VERSION:
        raise EmbeddingFormatError(f"unsupported embedding file version {version}")
    start = len(MAGIC) + 12
    header = json.loads(raw[start:start + hlen])
    r, d = header["rows"], header["dim"]
    body = raw[start + hlen:]
    need = 4 * r * (d + (2 if header["projection"] else 0))
    if len(body) != need:
        raise EmbeddingFormatError(f"expected {need} data bytes, found {len(body)}")
    vectors = np.frombuffer(body, dtype="<f4", count=r * d).reshape(r, d).astype(np.float32)
    proj = None
    if header["projection"]:
        proj = np.frombuffer(body, dtype="<f4", offset=4 * r * d).reshape(r, 2).astype(np.float32)
    return EmbeddingFile(vectors, header["tags"], header["clips"], header["frames"], header["labels"], proj)


def save(path: Path, emb: EmbeddingFile) -> None:
    Path(path).write_bytes(encode(emb))


def load(path: Path) -> EmbeddingFile:
    return decode(Path(path).read_bytes())


def matched_cosine(emb: EmbeddingFile, a: str = "vsem", b: str = "asem") -> float:
    """Mean cosine between the ``a`` and ``b`` rows of the same (clip, frame)."""
    index = {(c, f, t): i for i, (c, f, t) in enumerate(zip(emb.clips, emb.frames, emb.tags))}
    pairs = [(i, index[(c, f, b)]) for (c, f, t), i in index.items() if t == a and (c, f, b) in index]
    if not pairs:
        raise EmbeddingFormatError(f"no frames carry both {a} and {b} rows")
    x = emb.vectors.astype(np.float64)
    u = x[[p for p, _ in pairs]]
    v = x[[q for _, q in pairs]]
    cos = (u * v).sum(1) / np.maximum(np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1), 1e-12)
    return float(cos.mean())
