"""Uncompressed PCM WAV reading/writing.

Samples live in memory as float64 arrays shaped ``(channels, frames)`` and
normalized to [-1, 1]. Only RIFF/WAVE files with format code 1 (integer PCM),
8 or 16 bits and one or two channels are accepted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SUPPORTED_BIT_DEPTHS = (8, 16)
SUPPORTED_CHANNELS = (1, 2)


class WavError(ValueError):
    """Raised for malformed or unsupported WAV data. The message names the field."""


@dataclass(frozen=True)
class WavSpec:
    sample_rate: int
    channels: int = 1
    bit_depth: int = 16

    def __post_init__(self):
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        if self.channels not in SUPPORTED_CHANNELS:
            raise ValueError(f"channels must be 1 or 2, got {self.channels!r}")
        if self.bit_depth not in SUPPORTED_BIT_DEPTHS:
            raise ValueError(f"bit_depth must be 8 or 16, got {self.bit_depth!r}")


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Decoded audio: ``samples[channel, frame]`` in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2 or samples.shape[0] not in SUPPORTED_CHANNELS:
            raise ValueError(f"samples must have 1 or 2 channels, got shape {samples.shape}")
        if samples.shape[1] == 0:
            raise ValueError("clip must contain at least one frame")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if np.any(np.abs(samples) > 1.0):
            raise ValueError("samples must lie within [-1, 1]")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate!r}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def frames(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_seconds(self) -> float:
        return self.frames / self.sample_rate

    @property
    def mono(self) -> np.ndarray:
        """The single channel of a mono clip."""
        if self.channels != 1:
            raise ValueError("clip is not mono")
        return self.samples[0]

    def with_rate(self, sample_rate: int) -> "AudioClip":
        """Same samples, different declared rate (no resampling)."""
        return AudioClip(self.samples, sample_rate)

    def __eq__(self, other):
        if not isinstance(other, AudioClip):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, pos)
        yield chunk_id, pos + 8, size
        pos += 8 + size + (size & 1)


def read_wav(data: bytes) -> tuple[AudioClip, WavSpec]:
    if len(data) < 12:
        raise WavError("RIFF header: file shorter than 12 bytes")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF":
        raise WavError(f"RIFF header: chunk id is {riff!r}, expected b'RIFF'")
    if wave != b"WAVE":
        raise WavError(f"RIFF header: form type is {wave!r}, expected b'WAVE'")

    fmt = None
    payload = None
    for chunk_id, start, size in _chunks(data):
        if chunk_id == b"fmt ":
            if size < 16 or start + 16 > len(data):
                raise WavError(f"fmt chunk: size {size} too small")
            fmt = struct.unpack_from("<HHIIHH", data, start)
        elif chunk_id == b"data":
            if fmt is None:
                raise WavError("data chunk: appears before fmt chunk")
            if start + size > len(data):
                raise WavError(
                    f"data chunk: declares {size} bytes but only {len(data) - start} present (truncated)"
                )
            payload = data[start:start + size]
            break
    if fmt is None:
        raise WavError("fmt chunk: missing")
    if payload is None:
        raise WavError("data chunk: missing")

    format_code, channels, rate, _, _, bits = fmt
    if format_code != 1:
        raise WavError(f"format code: {format_code} is not PCM (1)")
    if channels not in SUPPORTED_CHANNELS:
        raise WavError(f"channel count: {channels} unsupported (1 or 2)")
    if bits not in SUPPORTED_BIT_DEPTHS:
        raise WavError(f"bit depth: {bits} unsupported (8 or 16)")
    if rate <= 0:
        raise WavError(f"sample rate: {rate} must be positive")

    block = channels * bits // 8
    if len(payload) % block:
        raise WavError(f"data chunk: {len(payload)} bytes is not a multiple of block size {block} (truncated)")
    if not payload:
        raise WavError("data chunk: contains no frames")

    if bits == 16:
        ints = np.frombuffer(payload, dtype="<i2").astype(np.float64)
        values = ints / 32768.0
    else:
        ints = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
        values = (ints - 128.0) / 128.0
    samples = values.reshape(-1, channels).T
    return AudioClip(samples, rate), WavSpec(rate, channels, bits)


def quantize(samples: np.ndarray, bit_depth: int) -> np.ndarray:
    """Round-to-nearest integer PCM codes, clamped to the representable range."""
    if bit_depth == 16:
        return np.clip(np.rint(samples * 32768.0), -32768, 32767).astype("<i2")
    if bit_depth == 8:
        return np.clip(np.rint(samples * 128.0) + 128, 0, 255).astype(np.uint8)
    raise ValueError(f"unsupported bit depth {bit_depth}")


def write_wav(clip: AudioClip, spec: WavSpec) -> bytes:
    if clip.channels != spec.channels:
        raise ValueError(f"clip has {clip.channels} channels but spec declares {spec.channels}")
    if clip.sample_rate != spec.sample_rate:
        raise ValueError(f"clip rate {clip.sample_rate} Hz does not match spec rate {spec.sample_rate} Hz")
    payload = quantize(clip.samples.T.reshape(-1), spec.bit_depth).tobytes()
    block = spec.channels * spec.bit_depth // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, spec.channels, spec.sample_rate, spec.sample_rate * block, block, spec.bit_depth,
        b"data", len(payload),
    )
    return header + payload


def load_wav(path) -> tuple[AudioClip, WavSpec]:
    return read_wav(Path(path).read_bytes())


def save_wav(path, clip: AudioClip, spec: WavSpec | None = None) -> None:
    if spec is None:
        spec = WavSpec(clip.sample_rate, clip.channels, 16)
    Path(path).write_bytes(write_wav(clip, spec))
