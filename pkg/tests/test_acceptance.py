"""Headline acceptance criteria. Each test is tagged with the criterion it
checks; the terminal summary prints one ACCEPTANCE line per criterion."""

import math
import re
import time

import numpy as np
import pytest

from conftest import brute_force, random_model
from fauna.audio_io import AudioClip, WavSpec, read_wav, write_wav
from fauna.features import FeatureConfig, SpectrogramImage, deltas, export_pgm, frame_signal, power_spectrum, read_pgm, spectrogram
from fauna.harness import (
    ExperimentConfig,
    clip_features,
    evaluate,
    knn_evaluate,
    load_dataset,
    load_model,
    run_experiment_grid,
    save_checkpoint,
    split_dataset,
    train_recognizer,
    true_class_scores,
)
from fauna.hmm import classify, dumps_recognizer, em_train, flat_start, forward_log_likelihood, loads_recognizer, viterbi
from fauna.preprocess import NoiseProfile, resample, spectral_subtract
from fauna.cli import main

FRACTIONS = (0.6, 0.2, 0.2)
SEED = 0


# -- HMM oracle equivalence ---------------------------------------------------------

@pytest.mark.acceptance("hmm-oracle-equivalence")
def test_hmm_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(120):
        n = int(rng.integers(1, 5))
        t = int(rng.integers(n, 7))
        d = int(rng.integers(1, 4))
        model = random_model(rng, n, d)
        y = rng.normal(0.0, 1.5, (t, d))
        total, best, _ = brute_force(model, y)
        _, vit = viterbi(model, y)
        worst = max(worst, abs(forward_log_likelihood(model, y) - math.log(total)), abs(vit - math.log(best)))
    elapsed = time.perf_counter() - start
    print(f"120 toy models: max |error| = {worst:.2e}, {elapsed:.2f} s")
    assert worst <= 1e-9
    assert elapsed < 10.0


# -- EM monotonicity ---------------------------------------------------------------

@pytest.mark.acceptance("em-monotonicity")
def test_em_monotone_on_random_datasets():
    rng = np.random.default_rng(7)
    worst_drop = 0.0
    for _ in range(24):
        d = int(rng.integers(1, 4))
        data = [rng.normal(rng.normal(0, 2, d), rng.uniform(0.5, 2, d), (int(rng.integers(6, 40)), d)).cumsum(axis=0) * 0.3
                for _ in range(int(rng.integers(2, 8)))]
        model = flat_start(data, int(rng.integers(1, 5)))
        _, history = em_train(model, data, max_iters=25, rel_tol=0.0)
        if len(history) > 1:
            worst_drop = max(worst_drop, float(-np.min(np.diff(history))))
    print(f"24 datasets: largest per-iteration decrease = {worst_drop:.2e}")
    assert worst_drop <= 1e-8


@pytest.mark.acceptance("em-monotonicity")
def test_em_one_state_is_ml_gaussian():
    rng = np.random.default_rng(8)
    for _ in range(5):
        data = [rng.normal(rng.normal(size=3), 1.5, (int(rng.integers(3, 30)), 3)) for _ in range(4)]
        trained, _ = em_train(flat_start(data, 1), data)
        frames = np.vstack(data)
        np.testing.assert_allclose(trained.means[0], frames.mean(axis=0), atol=1e-9, rtol=0)
        np.testing.assert_allclose(trained.variances[0], np.maximum(frames.var(axis=0), 1e-3), atol=1e-9, rtol=0)


# -- DSP invariants ----------------------------------------------------------------

@pytest.mark.acceptance("dsp-invariants")
def test_stft_parseval():
    rng = np.random.default_rng(1)
    for rate in (16000, 32000):
        cfg = FeatureConfig()
        frames = frame_signal(AudioClip(rng.uniform(-1, 1, (1, rate)), rate), cfg)
        n_fft = cfg.n_fft(rate)
        window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frames.shape[1]) / frames.shape[1])
        power = power_spectrum(frames, n_fft)
        full = power[:, 0] + power[:, -1] + 2 * power[:, 1:-1].sum(axis=1)
        np.testing.assert_allclose(np.sum((window * frames) ** 2, axis=1), full / n_fft, rtol=1e-6)


@pytest.mark.acceptance("dsp-invariants")
def test_spectral_subtraction_zero_profile_identity():
    rng = np.random.default_rng(2)
    for n in (1, 255, 512, 16000, 16001):
        x = rng.uniform(-0.9, 0.9, (1, n))
        out = spectral_subtract(AudioClip(x, 16000), NoiseProfile.silent(512, 16000)).samples
        assert out.shape == x.shape
        assert np.sqrt(np.mean((out - x) ** 2)) <= 1e-6


def _tone_gain(freq, src, dst):
    t = np.arange(src) / src
    y = resample(AudioClip(0.5 * np.sin(2 * np.pi * freq * t)[None, :], src), dst).samples[0]
    alias = freq if freq < dst / 2 else abs(dst * round(freq / dst) - freq)
    n = len(y)
    seg = slice(n // 4, 3 * n // 4)
    tt = np.arange(n)[seg] / dst
    basis = np.column_stack([np.sin(2 * np.pi * alias * tt), np.cos(2 * np.pi * alias * tt)])
    coef, *_ = np.linalg.lstsq(basis, y[seg], rcond=None)
    return float(np.hypot(*coef)) / 0.5


@pytest.mark.acceptance("dsp-invariants")
def test_resampler_passband_and_alias_rejection():
    # passband: up to 0.9 x output Nyquist (the contract keeps only 0.45 x rate)
    for src, dst in ((32000, 16000), (44100, 16000), (16000, 32000)):
        for f in np.linspace(100, 0.45 * min(src, dst), 12):
            assert abs(_tone_gain(f, src, dst) - 1.0) <= 0.01, (src, dst, f)
    for f in (9000, 10000, 12000, 15000):
        assert 20 * np.log10(_tone_gain(f, 32000, 16000)) <= -40.0, f
    assert 20 * np.log10(_tone_gain(7900, 32000, 16000)) >= -6.0


@pytest.mark.acceptance("dsp-invariants")
def test_delta_exact_on_constants_and_ramps():
    rng = np.random.default_rng(3)
    for n in (1, 2, 3):
        const = np.tile(rng.normal(size=4), (15, 1))
        np.testing.assert_array_equal(deltas(const, n), 0.0)
        slope = rng.normal(size=4)
        ramp = np.arange(15)[:, None] * slope + rng.normal(size=4)
        np.testing.assert_allclose(deltas(ramp, n)[n:-n], np.tile(slope, (15 - 2 * n, 1)), atol=1e-12)


# -- synthetic end-to-end ------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus(corpus_dir):
    ds = load_dataset(corpus_dir)
    return ds, split_dataset(ds, FRACTIONS, SEED)


@pytest.mark.acceptance("synthetic-end-to-end")
def test_synthetic_hmm_and_knn(corpus):
    ds, split = corpus
    start = time.perf_counter()
    result = train_recognizer(ds, split)
    hmm_cm = evaluate(result.recognizer, ds, split.test)
    knn_cm = knn_evaluate(ds, split, k=1)
    elapsed = time.perf_counter() - start
    print(f"HMM test accuracy {100 * hmm_cm.accuracy:.1f}% (N={hmm_cm.n}), off-diagonal {hmm_cm.off_diagonal_fraction:.3f}")
    print(hmm_cm.format())
    print(f"k-NN test accuracy {100 * knn_cm.accuracy:.1f}% (N={knn_cm.n}), off-diagonal {knn_cm.off_diagonal_fraction:.3f}")
    print(knn_cm.format())
    print(f"elapsed {elapsed:.1f} s")
    assert len(ds) == 120 and hmm_cm.n >= 20
    assert hmm_cm.accuracy >= 0.95 and knn_cm.accuracy >= 0.95
    assert hmm_cm.off_diagonal_fraction <= 0.05 and knn_cm.off_diagonal_fraction <= 0.05
    assert result.best.validation_accuracy >= 95.0
    assert elapsed < 120.0


# -- grid mismatch ------------------------------------------------------------------

@pytest.mark.acceptance("grid-rate-mismatch")
def test_grid_rate_mismatch_drops_true_class_score(corpus):
    ds, split = corpus
    report = run_experiment_grid(ds, ExperimentConfig.grid(), split, FeatureConfig())
    assert [(r.contract.target_channels, r.contract.target_rate) for r in report.rows] == [
        ("mono", 16000), ("stereo", 16000), ("mono", 32000), ("stereo", 32000)]
    # test clips as genuine 32 kHz audio, scored once with the true rate and once mislabelled as 16 kHz
    test = [(ds.items[i].label, resample(ds.items[i].clip, 32000)) for i in split.test]
    drops = []
    for row in report.rows:
        matched = float(np.mean(true_class_scores(row.recognizer, test)))
        mismatched = float(np.mean(true_class_scores(row.recognizer, [(l, c.with_rate(16000)) for l, c in test])))
        drops.append(matched - mismatched)
        print(f"{row.contract.target_channels}/{row.contract.target_rate}: matched {matched:.3f} "
              f"mismatched {mismatched:.3f} drop {matched - mismatched:.3f} test acc {row.test_accuracy:.1f}%")
    assert min(drops) >= 0.2


# -- golden formats and determinism -------------------------------------------------

def _cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, _ = capsys.readouterr()
    assert code == 0
    return out


@pytest.mark.acceptance("golden-formats")
def test_golden_formats_and_determinism(capsys, corpus_dir, tmp_path):
    train_args = ["--fractions", *FRACTIONS, "--seed", 11, "--max-iters", 10]
    outputs = []
    for run in ("a", "b"):
        model = tmp_path / run / "fauna.model"
        out = _cli(capsys, "train", corpus_dir, model, *train_args, "--report", tmp_path / run / "report.txt")
        outputs.append((out.replace(str(tmp_path / run), "<dir>"), model.read_bytes(),
                        (tmp_path / run / "report.txt").read_bytes()))
    assert outputs[0] == outputs[1]
    out = outputs[0][0]
    step_lines = [l for l in out.splitlines() if l.startswith("Step ")]
    assert step_lines and all(re.match(r"^Step \d+: Validation accuracy = \d{1,3}\.\d%", l) for l in step_lines)

    model = tmp_path / "a" / "fauna.model"
    wav = next((corpus_dir / "down_sweep").glob("*.wav"))
    lines = _cli(capsys, "classify", model, wav).splitlines()
    assert len(lines) == 3 and all(re.match(r"^\S+ \(score = \d\.\d{5}\)$", l) for l in lines)

    csv_path = tmp_path / "cm.csv"
    out = _cli(capsys, "evaluate", model, corpus_dir, "--fractions", *FRACTIONS, "--seed", 11, "--csv", csv_path)
    m = re.search(r"^Final test accuracy = (\d{1,3}\.\d)% \(N=(\d+)\)$", out, re.M)
    assert m
    matrix = out.split("Confusion Matrix:\n")[1].split("\nFinal")[0]
    printed = np.array([[int(v) for v in re.findall(r"\d+", row)] for row in matrix.splitlines()])
    csv_rows = [line.split(",")[1:] for line in csv_path.read_text().splitlines()[1:]]
    from_csv = np.array([[int(v) for v in row] for row in csv_rows])
    np.testing.assert_array_equal(from_csv.sum(axis=1), printed.sum(axis=1))
    assert from_csv.sum() == int(m.group(2))


# -- serialization round-trips -------------------------------------------------------

@pytest.mark.acceptance("serialization-round-trips")
def test_wav_round_trip_within_one_lsb():
    rng = np.random.default_rng(5)
    for _ in range(50):
        channels, frames, bits = int(rng.integers(1, 3)), int(rng.integers(1, 3000)), int(rng.choice([8, 16]))
        clip = AudioClip(rng.uniform(-1, 1, (channels, frames)), 16000)
        back, _ = read_wav(write_wav(clip, WavSpec(16000, channels, bits)))
        lsb = 1 / 32768 if bits == 16 else 1 / 128
        assert np.max(np.abs(back.samples - clip.samples)) <= lsb


@pytest.mark.acceptance("serialization-round-trips")
def test_model_round_trip_bit_identical(corpus, tmp_path):
    ds, split = corpus
    result = train_recognizer(ds, split, max_iters=5)
    rec = result.recognizer
    back = loads_recognizer(dumps_recognizer(rec))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, result.best)
    from_file = load_model(path)
    for i in split.test:
        f = clip_features(ds.items[i].clip, rec.contract, rec.feature_config)
        assert classify(back, f) == classify(rec, f) == classify(from_file, f)


@pytest.mark.acceptance("serialization-round-trips")
def test_pgm_reparses():
    for grid in (np.zeros((1, 1)), np.random.default_rng(6).uniform(-80, 0, (37, 129))):
        data = export_pgm(SpectrogramImage(grid))
        assert read_pgm(data).shape == (grid.shape[1], grid.shape[0])
    t = np.arange(8000) / 16000
    img = spectrogram(AudioClip(0.3 * np.sin(2 * np.pi * 1500 * t)[None, :], 16000))
    assert read_pgm(export_pgm(img)).shape == (257, img.grid.shape[0])
