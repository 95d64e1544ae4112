"""Class-signature audio synthesis and the log-mel filterbank front-end."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-10
RAMP_SECONDS = 0.010
HARMONIC_GAINS = (1.0, 0.5, 0.25)
CLASS_GAIN = 0.25


class ClippingError(ValueError):
    pass


def class_frequency(class_id: int) -> float:
    return 220.0 * 2.0 ** (class_id / 3.0)


def activity_envelope(active: np.ndarray, samples_per_frame: int, sample_rate: int) -> np.ndarray:
    """Piecewise-constant on/off envelope with raised-cosine ramps at every transition."""
    env = np.repeat(active.astype(np.float64), samples_per_frame)
    ramp = max(1, int(round(RAMP_SECONDS * sample_rate)))
    rise = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp) + 0.5) / ramp)
    for t in range(len(active)):
        start = t * samples_per_frame
        prev = active[t - 1] if t > 0 else False
        nxt = active[t + 1] if t + 1 < len(active) else False
        if active[t] and not prev:
            env[start:start + ramp] = rise
        if active[t] and not nxt:
            end = start + samples_per_frame
            env[end - ramp:end] = rise[::-1]
    return env


def synth_audio(schedule: np.ndarray, frame_seconds: float, sample_rate: int, seed: int,
                noise_level: float = 0.0, gain: float = CLASS_GAIN) -> np.ndarray:
    """Mono waveform for a (T, num_classes) activity schedule.

    Class ``c`` sounds as a fundamental at ``class_frequency(c)`` plus two harmonics.
    """
    schedule = np.asarray(schedule, dtype=bool)
    t_frames, num_classes = schedule.shape
    spf = int(round(frame_seconds * sample_rate))
    n = t_frames * spf
    rng = np.random.default_rng(seed)
    time = np.arange(n) / sample_rate
    wave = np.zeros(n)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(num_classes, len(HARMONIC_GAINS)))
    for c in range(num_classes):
        if not schedule[:, c].any():
            continue
        f0 = class_frequency(c + 1)
        tone = sum(g * np.sin(2 * np.pi * f0 * (h + 1) * time + phases[c, h])
                   for h, g in enumerate(HARMONIC_GAINS))
        wave += gain * tone * activity_envelope(schedule[:, c], spf, sample_rate)
    if noise_level > 0:
        wave += rng.normal(0.0, noise_level, size=n)
    if np.max(np.abs(wave), initial=0.0) > 1.0:
        raise ClippingError("synthesised waveform exceeds [-1, 1]")
    return wave


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def frame_signal(waveform: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centre (reflect) padded, Hann-windowed frames (n_frames, n_fft)."""
    x = np.asarray(waveform, dtype=np.float64)
    pad = n_fft // 2
    x = np.pad(x, pad, mode="reflect") if len(x) > pad else np.pad(x, pad)
    n_frames = 1 + (len(x) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx] * hann_window(n_fft)[None, :]


def stft_magnitude(waveform: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """|DFT| of each windowed frame: (n_frames, n_fft // 2 + 1)."""
    if not _is_pow2(n_fft):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    return np.abs(np.fft.rfft(frame_signal(waveform, n_fft, hop), axis=-1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """The n_mels + 2 filter break points in Hz (edges and centres)."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, f_min: float, f_max: float) -> np.ndarray:
    """Triangular HTK-mel filters (n_mels, n_fft // 2 + 1), each row scaled to peak at 1."""
    if f_max > sample_rate / 2:
        raise ValueError(f"f_max {f_max} exceeds Nyquist {sample_rate / 2}")
    if not 0 <= f_min < f_max:
        raise ValueError("need 0 <= f_min < f_max")
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    pts = mel_points(n_mels, f_min, f_max)
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None] - lo) / (mid - lo)
    down = (hi - freqs[None]) / (hi - mid)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    peak = fb.max(axis=1, keepdims=True)
    if np.any(peak == 0):
        raise ValueError("a mel filter covers no FFT bin; use fewer mels or a larger n_fft")
    return fb / peak


@dataclass
class FbankFeatures:
    values: np.ndarray  # (T_fbank, n_mels)
    sample_rate: int
    n_fft: int
    hop: int


def log_mel(magnitudes: np.ndarray, n_mels: int, sample_rate: int, f_min: float, f_max: float,
            hop: int = 0) -> FbankFeatures:
    """log(filterbank . power + floor) for each STFT frame."""
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    n_fft = 2 * (magnitudes.shape[-1] - 1)
    fb = mel_filterbank(n_mels, n_fft, sample_rate, f_min, f_max)
    values = np.log(magnitudes ** 2 @ fb.T + LOG_FLOOR)
    return FbankFeatures(values=values, sample_rate=sample_rate, n_fft=n_fft, hop=hop)


@dataclass
class FbankConfig:
    sample_rate: int = 16000
    frame_seconds: float = 1.0
    n_fft: int = 512
    n_mels: int = 64
    rows_per_frame: int = 16
    f_min: float = 20.0
    f_max: float = 8000.0

    @property
    def hop(self) -> int:
        spf = int(round(self.frame_seconds * self.sample_rate))
        if spf % self.rows_per_frame:
            raise ValueError("samples per video frame must be divisible by rows_per_frame")
        return spf // self.rows_per_frame


def compute_fbank(waveform: np.ndarray, num_frames: int, cfg: FbankConfig | None = None) -> FbankFeatures:
    """Log-mel features aligned so every video frame owns exactly ``rows_per_frame`` rows."""
    cfg = cfg or FbankConfig()
    mags = stft_magnitude(waveform, cfg.n_fft, cfg.hop)
    feats = log_mel(mags, cfg.n_mels, cfg.sample_rate, cfg.f_min, cfg.f_max, hop=cfg.hop)
    want = num_frames * cfg.rows_per_frame
    values = feats.values[:want]
    if len(values) < want:
        floor = np.full((want - len(values), cfg.n_mels), np.log(LOG_FLOOR))
        values = np.concatenate([values, floor])
    feats.values = values
    return feats
