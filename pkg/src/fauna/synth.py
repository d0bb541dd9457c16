"""Synthetic four-class call corpus: two steady tones and two linear sweeps in white noise.

Run ``python -m fauna.synth OUT_DIR`` to write it as ``OUT_DIR/<label>/*.wav``.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, WavSpec, save_wav

# label -> (start Hz, end Hz)
CALLS = {
    "tone_800": (800.0, 800.0),
    "tone_2400": (2400.0, 2400.0),
    "up_sweep": (500.0, 3000.0),
    "down_sweep": (3000.0, 500.0),
}


def synth_clip(
    label: str,
    rng: np.random.Generator,
    rate: int = 16000,
    duration: float = 1.0,
    snr_db: float = 20.0,
    jitter: float = 0.03,
) -> AudioClip:
    f0, f1 = CALLS[label]
    scale = 1.0 + rng.uniform(-jitter, jitter)
    f0, f1 = f0 * scale, f1 * scale
    n = int(round(rate * duration))
    t = np.arange(n) / rate
    phase = 2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * duration)) + rng.uniform(0, 2 * np.pi)
    fade = min(n // 2, int(0.01 * rate))
    envelope = np.ones(n)
    if fade:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        envelope[:fade] = ramp
        envelope[n - fade:] = ramp[::-1]
    signal = rng.uniform(0.3, 0.6) * envelope * np.sin(phase)
    noise_power = np.mean(signal ** 2) / 10.0 ** (snr_db / 10.0)
    noisy = signal + rng.normal(0.0, np.sqrt(noise_power), n)
    return AudioClip(np.clip(noisy, -1.0, 1.0), rate)


def synthetic_corpus(
    clips_per_class: int = 30,
    rate: int = 16000,
    duration: float = 1.0,
    snr_db: float = 20.0,
    seed: int = 0,
) -> list[tuple[str, str, AudioClip]]:
    """``(label, file name, clip)`` triples, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    items = []
    for label in CALLS:
        for i in range(clips_per_class):
            items.append((label, f"{label}_{i:03d}.wav", synth_clip(label, rng, rate, duration, snr_db)))
    return items


def write_corpus(root, **kwargs) -> list[Path]:
    root = Path(root)
    paths = []
    for label, name, clip in synthetic_corpus(**kwargs):
        path = root / label / name
        path.parent.mkdir(parents=True, exist_ok=True)
        save_wav(path, clip, WavSpec(clip.sample_rate, 1, 16))
        paths.append(path)
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Write the synthetic tone/sweep corpus as WAV files")
    parser.add_argument("out_dir")
    parser.add_argument("--clips-per-class", type=int, default=30)
    parser.add_argument("--rate", type=int, default=16000)
    parser.add_argument("--snr-db", type=float, default=20.0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    paths = write_corpus(
        args.out_dir, clips_per_class=args.clips_per_class, rate=args.rate, snr_db=args.snr_db, seed=args.seed
    )
    print(f"wrote {len(paths)} clips to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
