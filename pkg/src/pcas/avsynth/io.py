"""Binary PPM / PGM and 16-bit PCM WAV readers and writers."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np


def write_ppm(path: Path, image: np.ndarray) -> None:
    """image: (3, H, W) floats in [0, 1] -> binary P6 with maxval 255."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    c, h, w = img.shape
    if c != 3:
        raise ValueError("PPM needs 3 channels")
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.transpose(1, 2, 0).tobytes())


def write_pgm(path: Path, gray: np.ndarray) -> None:
    """gray: (H, W) uint8 values (class indices) -> binary P5."""
    arr = np.asarray(gray)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    arr = arr.astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def _read_netpbm(path: Path, magic: bytes) -> tuple[int, int, bytes]:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} header, got {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    return w, h, raw[pos + 1:]


def read_ppm(path: Path) -> np.ndarray:
    """-> (3, H, W) floats in [0, 1]."""
    w, h, body = _read_netpbm(path, b"P6")
    arr = np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path: Path) -> np.ndarray:
    w, h, body = _read_netpbm(path, b"P5")
    return np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def write_wav(path: Path, waveform: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(waveform) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path: Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = f.getframerate()
        data = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32767.0, rate
