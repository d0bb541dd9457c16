"""Dataset normalization and clean-up: format contract, resampling, bandpass,
spectral subtraction and energy-gated silence removal."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy.signal import get_window

from .audio_io import AudioClip

RESAMPLE_TAPS_PER_SIDE = 32
RESAMPLE_KAISER_BETA = 8.0

BANDPASS_TAPS = 101
BANDPASS_REFERENCE_RATE = 16000
SUBTRACT_ALPHA = 1.0
SUBTRACT_FLOOR = 0.01


@dataclass(frozen=True)
class FormatContract:
    target_rate: int = 16000
    target_channels: str = "mono"
    target_duration: float = 1.0
    target_bit_depth: int = 16

    def __post_init__(self):
        if self.target_rate <= 0:
            raise ValueError(f"target_rate must be positive, got {self.target_rate}")
        if self.target_duration <= 0:
            raise ValueError(f"target_duration must be positive, got {self.target_duration}")
        if self.target_channels not in ("mono", "stereo"):
            raise ValueError(f"target_channels must be 'mono' or 'stereo', got {self.target_channels!r}")
        if self.target_bit_depth not in (8, 16):
            raise ValueError(f"target_bit_depth must be 8 or 16, got {self.target_bit_depth}")

    @property
    def channel_count(self) -> int:
        return 1 if self.target_channels == "mono" else 2

    @property
    def target_frames(self) -> int:
        return _round_half_up(self.target_duration * self.target_rate)

    @property
    def band(self) -> tuple[float, float]:
        """Bandpass edges applied by :func:`apply_contract`."""
        return 500.0, min(0.45 * self.target_rate, 18000.0)


@dataclass(frozen=True, eq=False)
class NoiseProfile:
    mean_magnitude: np.ndarray
    fft_size: int
    sample_rate: int

    def __post_init__(self):
        mag = np.asarray(self.mean_magnitude, dtype=np.float64)
        if mag.shape != (self.fft_size // 2 + 1,):
            raise ValueError(f"profile needs {self.fft_size // 2 + 1} bins, got {mag.shape}")
        if not np.all(np.isfinite(mag)) or np.any(mag < 0):
            raise ValueError("profile magnitudes must be finite and nonnegative")
        object.__setattr__(self, "mean_magnitude", mag)

    @classmethod
    def silent(cls, fft_size: int, sample_rate: int) -> "NoiseProfile":
        return cls(np.zeros(fft_size // 2 + 1), fft_size, sample_rate)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _bounded(samples: np.ndarray, rate: int) -> AudioClip:
    return AudioClip(np.clip(samples, -1.0, 1.0), rate)


def _require_mono(clip: AudioClip, op: str) -> np.ndarray:
    if clip.channels != 1:
        raise ValueError(f"{op} requires a mono clip, got {clip.channels} channels")
    return clip.samples[0]


# -- resampling ---------------------------------------------------------------

def _polyphase_bank(up: int, down: int) -> tuple[np.ndarray, int]:
    """Kaiser-windowed sinc taps for each of the ``up`` output phases.

    Row ``p`` holds the weights applied to input samples ``base-K+1 .. base+K``
    where ``base = floor(n*down/up)`` and ``p = n*down mod up``.
    """
    ratio = up / down
    cutoff = min(1.0, ratio)
    half = int(math.ceil(RESAMPLE_TAPS_PER_SIDE / min(1.0, ratio)))
    offsets = np.arange(-half + 1, half + 1)
    frac = np.arange(up)[:, None] / up
    t = frac - offsets[None, :]  # distance from each tap to the output instant
    arg = np.clip(1.0 - (t / half) ** 2, 0.0, None)
    window = np.i0(RESAMPLE_KAISER_BETA * np.sqrt(arg)) / np.i0(RESAMPLE_KAISER_BETA)
    taps = cutoff * np.sinc(cutoff * t) * window
    taps /= taps.sum(axis=1, keepdims=True)
    return taps, half


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited rate conversion by polyphase windowed-sinc interpolation."""
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise ValueError(f"target_rate must be a positive integer, got {target_rate!r}")
    if target_rate == clip.sample_rate:
        return clip
    step = Fraction(clip.sample_rate, int(target_rate))
    up, down = step.denominator, step.numerator
    bank, half = _polyphase_bank(up, down)

    n_in = clip.frames
    n_out = (2 * n_in * target_rate + clip.sample_rate) // (2 * clip.sample_rate)
    n = np.arange(n_out)
    base = (n * down) // up
    phase = (n * down) % up
    idx = base[:, None] + np.arange(-half + 1, half + 1)[None, :]
    valid = (idx >= 0) & (idx < n_in)
    idx = np.clip(idx, 0, n_in - 1)
    weights = bank[phase] * valid

    out = np.stack([np.einsum("ij,ij->i", weights, ch[idx]) for ch in clip.samples])
    return _bounded(out, int(target_rate))


# -- channels and duration ----------------------------------------------------

def downmix(clip: AudioClip) -> AudioClip:
    if clip.channels == 1:
        return clip
    return AudioClip(clip.samples.mean(axis=0, keepdims=True), clip.sample_rate)


def upmix(clip: AudioClip) -> AudioClip:
    if clip.channels == 2:
        return clip
    return AudioClip(np.vstack([clip.samples, clip.samples]), clip.sample_rate)


def fix_duration(clip: AudioClip, seconds: float) -> AudioClip:
    """Center-crop or symmetrically zero-pad to ``round(seconds * rate)`` frames.

    When padding an odd number of frames the extra zero goes on the tail.
    """
    if seconds <= 0:
        raise ValueError(f"seconds must be positive, got {seconds}")
    target = _round_half_up(seconds * clip.sample_rate)
    frames = clip.frames
    if frames == target:
        return clip
    if frames > target:
        start = (frames - target) // 2
        return AudioClip(clip.samples[:, start:start + target], clip.sample_rate)
    lead = (target - frames) // 2
    tail = target - frames - lead
    return AudioClip(np.pad(clip.samples, ((0, 0), (lead, tail))), clip.sample_rate)


# -- bandpass -----------------------------------------------------------------

def bandpass_numtaps(rate: int) -> int:
    """101 taps up to 16 kHz; above that the filter keeps the same duration."""
    half = math.ceil((BANDPASS_TAPS // 2) * rate / BANDPASS_REFERENCE_RATE)
    return max(BANDPASS_TAPS, 2 * half + 1)


def bandpass_taps(low: float, high: float, rate: int, numtaps: Optional[int] = None) -> np.ndarray:
    """Hamming-windowed sinc bandpass (difference of two lowpass prototypes)."""
    if numtaps is None:
        numtaps = bandpass_numtaps(rate)
    n = np.arange(numtaps) - (numtaps - 1) / 2
    lo = 2 * low / rate
    hi = 2 * high / rate
    ideal = hi * np.sinc(hi * n) - lo * np.sinc(lo * n)
    return ideal * np.hamming(numtaps)


def bandpass(clip: AudioClip, low: float, high: float) -> AudioClip:
    rate = clip.sample_rate
    if not 0 < low < high:
        raise ValueError(f"band must satisfy 0 < low < high, got [{low}, {high}]")
    if high >= rate / 2:
        raise ValueError(f"band edge {high} Hz is outside the Nyquist limit {rate / 2} Hz")
    taps = bandpass_taps(low, high, rate)
    out = np.stack([np.convolve(ch, taps, mode="same") for ch in clip.samples])
    return _bounded(out, rate)


# -- noise reduction ----------------------------------------------------------

def _check_fft_size(fft_size: int) -> None:
    if fft_size < 64 or fft_size & (fft_size - 1):
        raise ValueError(f"fft_size must be a power of two >= 64, got {fft_size}")


def _hann(size: int) -> np.ndarray:
    # periodic Hann sums to exactly 1 at 50% overlap
    return get_window("hann", size, fftbins=True)


def _full_frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    if len(x) < size:
        x = np.pad(x, (0, size - len(x)))
    count = 1 + (len(x) - size) // hop
    idx = np.arange(size)[None, :] + hop * np.arange(count)[:, None]
    return x[idx]


def estimate_noise_profile(clips: Sequence[AudioClip], fft_size: int = 512) -> NoiseProfile:
    """Mean STFT magnitude over every full Hann frame of every clip (hop = fft_size/2)."""
    if not clips:
        raise ValueError("cannot estimate a noise profile from zero clips")
    _check_fft_size(fft_size)
    rates = {c.sample_rate for c in clips}
    if len(rates) != 1:
        raise ValueError(f"noise clips have mixed sample rates {sorted(rates)}")
    window = _hann(fft_size)
    total = np.zeros(fft_size // 2 + 1)
    count = 0
    for clip in clips:
        frames = _full_frames(_require_mono(clip, "estimate_noise_profile"), fft_size, fft_size // 2)
        total += np.abs(np.fft.rfft(frames * window, axis=1)).sum(axis=0)
        count += len(frames)
    return NoiseProfile(total / count, fft_size, rates.pop())


def spectral_subtract(clip: AudioClip, profile: NoiseProfile) -> AudioClip:
    """Magnitude spectral subtraction with a spectral floor, resynthesized by overlap-add."""
    x = _require_mono(clip, "spectral_subtract")
    if clip.sample_rate != profile.sample_rate:
        raise ValueError(
            f"clip rate {clip.sample_rate} Hz does not match noise profile rate {profile.sample_rate} Hz"
        )
    size = profile.fft_size
    hop = size // 2
    # pad so every original sample is covered by two frames whose windows sum to 1
    padded = np.pad(x, (hop, hop + (-len(x)) % hop + hop))
    frames = _full_frames(padded, size, hop)
    spec = np.fft.rfft(frames * _hann(size), axis=1)
    mag = np.abs(spec)
    cleaned = np.maximum(mag - SUBTRACT_ALPHA * profile.mean_magnitude, SUBTRACT_FLOOR * mag)
    frames_out = np.fft.irfft(cleaned * np.exp(1j * np.angle(spec)), n=size, axis=1)

    out = np.zeros(len(padded))
    for i, frame in enumerate(frames_out):
        out[i * hop:i * hop + size] += frame
    return _bounded(out[hop:hop + len(x)][np.newaxis, :], clip.sample_rate)


# -- silence removal ----------------------------------------------------------

def remove_silence(clip: AudioClip, threshold_db: float = -40.0, frame_ms: float = 10.0) -> AudioClip:
    """Drop frames whose RMS falls below ``threshold_db`` relative to the loudest frame."""
    x = _require_mono(clip, "remove_silence")
    size = max(1, _round_half_up(clip.sample_rate * frame_ms / 1000.0))
    starts = np.arange(0, len(x), size)
    rms = np.array([np.sqrt(np.mean(x[s:s + size] ** 2)) for s in starts])
    keep = rms >= rms.max() * 10.0 ** (threshold_db / 20.0)
    if rms.max() == 0 or not keep.any():
        return clip
    if keep.all():
        return clip
    kept = np.concatenate([x[s:s + size] for s, k in zip(starts, keep) if k])
    return AudioClip(kept[np.newaxis, :], clip.sample_rate)


# -- pipeline -----------------------------------------------------------------

def apply_contract(
    clip: AudioClip,
    contract: FormatContract = FormatContract(),
    profile: Optional[NoiseProfile] = None,
) -> AudioClip:
    """Downmix, resample, bandpass, denoise, gate silence, fix duration, upmix.

    Processing always happens on the mono mix; a stereo contract duplicates
    the result into both channels at the end.
    """
    out = downmix(clip)
    out = resample(out, contract.target_rate)
    low, high = contract.band
    out = bandpass(out, low, high)
    if profile is not None:
        out = spectral_subtract(out, profile)
    out = remove_silence(out)
    out = fix_duration(out, contract.target_duration)
    if contract.target_channels == "stereo":
        out = upmix(out)
    return out


def contract_noise_profile(
    clips: Sequence[AudioClip], contract: FormatContract = FormatContract(), fft_size: int = 512
) -> NoiseProfile:
    """Noise profile of clips brought to the contract's rate and band, matching
    the signal path :func:`apply_contract` feeds into spectral subtraction."""
    low, high = contract.band
    prepared = [bandpass(resample(downmix(c), contract.target_rate), low, high) for c in clips]
    return estimate_noise_profile(prepared, fft_size)
