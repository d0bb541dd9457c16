"""MFCC(+delta, +delta-delta) features and log-magnitude spectrogram images."""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window

from .audio_io import AudioClip

LOG_FLOOR = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class FeatureConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: Optional[int] = None
    num_mel_filters: int = 20
    num_cepstra: int = 13
    mel_low: float = 300.0
    mel_high: Optional[float] = None
    delta_window: int = 2
    include_deltas: bool = True
    preemphasis: float = 0.97

    def __post_init__(self):
        if not 0 < self.hop_ms <= self.frame_ms:
            raise ValueError(f"need 0 < hop_ms <= frame_ms, got hop {self.hop_ms}, frame {self.frame_ms}")
        if not 1 <= self.num_cepstra <= self.num_mel_filters:
            raise ValueError(
                f"need 1 <= num_cepstra <= num_mel_filters, got {self.num_cepstra} > {self.num_mel_filters}"
            )
        if self.mel_low < 0 or (self.mel_high is not None and self.mel_high <= self.mel_low):
            raise ValueError(f"need 0 <= mel_low < mel_high, got [{self.mel_low}, {self.mel_high}]")
        if self.delta_window < 1:
            raise ValueError(f"delta_window must be >= 1, got {self.delta_window}")
        if self.fft_size is not None and (self.fft_size < 2 or self.fft_size & (self.fft_size - 1)):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")

    def frame_length(self, rate: int) -> int:
        return max(1, int(round(self.frame_ms * rate / 1000.0)))

    def hop_length(self, rate: int) -> int:
        return max(1, int(round(self.hop_ms * rate / 1000.0)))

    def n_fft(self, rate: int) -> int:
        frame = self.frame_length(rate)
        if self.fft_size is not None:
            if self.fft_size < frame:
                raise ValueError(f"fft_size {self.fft_size} is shorter than the {frame}-sample frame")
            return self.fft_size
        return 1 << (frame - 1).bit_length()

    def band(self, rate: int) -> tuple[float, float]:
        high = 0.45 * rate if self.mel_high is None else self.mel_high
        if not 0 <= self.mel_low < high <= rate / 2:
            raise ValueError(f"mel band [{self.mel_low}, {high}] Hz invalid at {rate} Hz")
        return self.mel_low, high

    @property
    def dim(self) -> int:
        return self.num_cepstra * (3 if self.include_deltas else 1)

    def to_text(self) -> str:
        return " ".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "FeatureConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for item in text.split():
            key, _, raw = item.partition("=")
            if key not in types:
                raise ValueError(f"unknown feature field {key!r}")
            if raw == "None":
                kwargs[key] = None
            elif raw in ("True", "False"):
                kwargs[key] = raw == "True"
            elif "int" in str(types[key]):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """T x D feature vectors, one row per frame."""

    vectors: np.ndarray
    frame_rate: float
    config: FeatureConfig

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"feature matrix must be T x D with T >= 1, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature matrix contains non-finite values")
        object.__setattr__(self, "vectors", v)

    def __array__(self, dtype=None, copy=None):
        return self.vectors if dtype is None else self.vectors.astype(dtype)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        np.savetxt(buf, self.vectors, delimiter=",", fmt="%.17g")
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class SpectrogramImage:
    """T x F grid of magnitudes in dB, clamped below at ``db_floor``."""

    grid: np.ndarray
    db_floor: float = -80.0


def frame_signal(clip: AudioClip, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Split a mono clip into overlapping frames; the last one is zero-padded."""
    if clip.channels != 1:
        raise ValueError("frame_signal requires a mono clip")
    x = clip.samples[0]
    size = config.frame_length(clip.sample_rate)
    hop = config.hop_length(clip.sample_rate)
    count = 1 + (len(x) - 1) // hop
    padded = np.pad(x, (0, max(0, (count - 1) * hop + size - len(x))))
    idx = np.arange(size)[None, :] + hop * np.arange(count)[:, None]
    return padded[idx]


def mel_filterbank(config: FeatureConfig, rate: int) -> np.ndarray:
    """Triangular filters, evenly spaced in mel, sampled at the rfft bin frequencies."""
    low, high = config.band(rate)
    n_fft = config.n_fft(rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(low), hz_to_mel(high), config.num_mel_filters + 2))
    bins = np.arange(n_fft // 2 + 1) * rate / n_fft
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - left) / (center - left)
    falling = (right - bins) / (right - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    window = get_window("hann", frames.shape[1], fftbins=True)
    return np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1)) ** 2


def log_mel_energies(clip: AudioClip, config: FeatureConfig) -> np.ndarray:
    frames = frame_signal(clip, config)
    if config.preemphasis:
        frames = np.concatenate(
            [frames[:, :1], frames[:, 1:] - config.preemphasis * frames[:, :-1]], axis=1
        )
    power = power_spectrum(frames, config.n_fft(clip.sample_rate))
    energies = power @ mel_filterbank(config, clip.sample_rate).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def deltas(features, n: int = 2) -> np.ndarray:
    """Regression deltas over +/- n frames with edge frames replicated."""
    if n < 1:
        raise ValueError(f"delta window must be >= 1, got {n}")
    c = np.asarray(features, dtype=np.float64)
    T = c.shape[0]
    padded = np.concatenate([np.repeat(c[:1], n, axis=0), c, np.repeat(c[-1:], n, axis=0)])
    out = np.zeros_like(c)
    for i in range(1, n + 1):
        out += i * (padded[n + i:n + i + T] - padded[n - i:n - i + T])
    return out / (2 * sum(i * i for i in range(1, n + 1)))


def mfcc(clip: AudioClip, config: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    if clip.channels != 1:
        raise ValueError("mfcc requires a mono clip")
    logmel = log_mel_energies(clip, config)
    cepstra = dct(logmel, type=2, norm="ortho", axis=1)[:, :config.num_cepstra]
    if config.include_deltas:
        d1 = deltas(cepstra, config.delta_window)
        d2 = deltas(d1, config.delta_window)
        cepstra = np.hstack([cepstra, d1, d2])
    return FeatureMatrix(cepstra, clip.sample_rate / config.hop_length(clip.sample_rate), config)


def spectrogram(clip: AudioClip, config: FeatureConfig = FeatureConfig(), db_floor: float = -80.0) -> SpectrogramImage:
    frames = frame_signal(clip, config)
    window = get_window("hann", frames.shape[1], fftbins=True)
    mag = np.abs(np.fft.rfft(frames * window, n=config.n_fft(clip.sample_rate), axis=1))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    return SpectrogramImage(np.maximum(db, db_floor), db_floor)


def export_pgm(image: SpectrogramImage) -> bytes:
    """Binary greyscale PGM: time runs left to right, low frequencies at the bottom.

    Levels are stretched over the image's own dB range; a flat image is all zeros.
    """
    grid = np.asarray(image.grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        levels = np.rint((grid - lo) / (hi - lo) * 255.0)
    else:
        levels = np.zeros_like(grid)
    pixels = levels.T[::-1].astype(np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(data: bytes) -> np.ndarray:
    """Parse a binary PGM into a ``height x width`` uint8 array."""
    m = _PGM_HEADER.match(data)
    if not m:
        raise ValueError("not a binary PGM (P5) image")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"unsupported PGM maxval {maxval}")
    body = data[m.end():]
    if len(body) != width * height:
        raise ValueError(f"PGM body has {len(body)} bytes, expected {width * height}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def with_overrides(config: FeatureConfig, **changes) -> FeatureConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
