"""``fauna`` command-line interface.

Exit status: 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import harness
from .audio_io import WavError, WavSpec, load_wav, save_wav
from .features import FeatureConfig, export_pgm, spectrogram
from .hmm import ModelFormatError, TrainingError
from .preprocess import FormatContract, apply_contract, contract_noise_profile, downmix

log = logging.getLogger("fauna")


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get("FAUNA_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"FAUNA_SEED must be an integer, got {raw!r}") from None


# -- shared flag groups ----------------------------------------------------------------

def _add_contract_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("format contract")
    g.add_argument("--target-rate", type=int, default=16000)
    g.add_argument("--target-channels", choices=("mono", "stereo"), default="mono")
    g.add_argument("--target-duration", type=float, default=1.0)
    g.add_argument("--target-bit-depth", type=int, choices=(8, 16), default=16)


def _add_feature_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("features")
    g.add_argument("--frame-ms", type=float, default=25.0)
    g.add_argument("--hop-ms", type=float, default=10.0)
    g.add_argument("--fft-size", type=int, default=None)
    g.add_argument("--num-mel-filters", type=int, default=20)
    g.add_argument("--num-cepstra", type=int, default=13)
    g.add_argument("--mel-low", type=float, default=300.0)
    g.add_argument("--mel-high", type=float, default=None)
    g.add_argument("--delta-window", type=int, default=2)
    g.add_argument("--no-deltas", dest="include_deltas", action="store_false")
    g.add_argument("--preemphasis", type=float, default=0.97)


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("split")
    g.add_argument("--fractions", type=float, nargs=3, default=(0.8, 0.1, 0.1),
                   metavar=("TRAIN", "VALIDATION", "TEST"))
    g.add_argument("--seed", type=int, default=None, help="defaults to $FAUNA_SEED, else 0")


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--n-states", type=int, default=5)
    g.add_argument("--max-iters", type=int, default=50)
    g.add_argument("--eval-every", type=int, default=5)
    g.add_argument("--rel-tol", type=float, default=1e-5)
    g.add_argument("--grammar-scale", type=float, default=1.0)
    g.add_argument("--reject-threshold", type=float, default=0.0)
    g.add_argument("--variance-floor", type=float, default=1e-3)


def _contract(args) -> FormatContract:
    try:
        return FormatContract(args.target_rate, args.target_channels, args.target_duration, args.target_bit_depth)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _feature_config(args) -> FeatureConfig:
    try:
        return FeatureConfig(
            frame_ms=args.frame_ms, hop_ms=args.hop_ms, fft_size=args.fft_size,
            num_mel_filters=args.num_mel_filters, num_cepstra=args.num_cepstra,
            mel_low=args.mel_low, mel_high=args.mel_high, delta_window=args.delta_window,
            include_deltas=args.include_deltas, preemphasis=args.preemphasis,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _training_kwargs(args) -> dict:
    return dict(
        n_states=args.n_states, max_iters=args.max_iters, eval_every=args.eval_every, rel_tol=args.rel_tol,
        grammar_scale=args.grammar_scale, variance_floor=args.variance_floor,
    )


def _seed(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} {path} is not a directory")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {path} does not exist")
    return p


def _load_split(args):
    ds = harness.load_dataset(args.data_dir)
    try:
        split = harness.split_dataset(ds, args.fractions, _seed(args))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return ds, split


def _print_confusion(confusion: harness.ConfusionMatrix) -> None:
    print(f"set_size={confusion.n}")
    print("Labels: " + " ".join(confusion.labels))
    print("Confusion Matrix:")
    print(confusion.format())
    print(harness.final_accuracy_line(confusion))


# -- commands --------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    in_dir = _require_dir(args.in_dir, "input directory")
    out_dir = Path(args.out_dir)
    if out_dir.resolve() == in_dir.resolve():
        raise UsageError("output directory must differ from the input directory")
    contract = _contract(args)
    profile = None
    if args.noise_dir:
        noise_dir = _require_dir(args.noise_dir, "noise directory")
        noise = [load_wav(p)[0] for p in sorted(noise_dir.rglob("*")) if p.suffix.lower() == ".wav"]
        if not noise:
            raise ValueError(f"no WAV files in noise directory {noise_dir}")
        profile = contract_noise_profile(noise, contract, args.noise_fft_size)
    ds = harness.load_dataset(in_dir)
    spec = WavSpec(contract.target_rate, contract.channel_count, contract.target_bit_depth)
    for item in ds.items:
        target = out_dir / item.label / item.path.name
        target.parent.mkdir(parents=True, exist_ok=True)
        save_wav(target, apply_contract(item.clip, contract, profile), spec)
    print(f"preprocessed {len(ds.items)} files into {out_dir} (skipped {ds.skipped})")
    return 0


def cmd_train(args) -> int:
    _require_dir(args.data_dir, "data directory")
    model_out = Path(args.model_out)
    ds, split = _load_split(args)
    contract, fcfg = _contract(args), _feature_config(args)
    if ds.skipped:
        print(f"skipped {ds.skipped} unreadable files")
    print(f"train={len(split.train)} validation={len(split.validation)} test={len(split.test)}")
    model_out.parent.mkdir(parents=True, exist_ok=True)

    def on_checkpoint(ckpt: harness.Checkpoint) -> None:
        path = model_out.with_name(f"{model_out.name}.ckpt-{ckpt.step}")
        harness.save_checkpoint(path, ckpt)
        print(ckpt.log_line)
        print(f'Saving to "{path}"')

    result = harness.train_recognizer(
        ds, split, contract, fcfg, reject_threshold=args.reject_threshold,
        on_checkpoint=on_checkpoint, **_training_kwargs(args),
    )
    harness.save_checkpoint(model_out, result.best)
    print(f"Best checkpoint: step {result.best.step} ({result.best.validation_accuracy:.1f}%)")
    print(f'Saving to "{model_out}"')
    test_confusion = None
    if split.test:
        test_confusion = harness.evaluate(result.recognizer, ds, split.test, reject_threshold=args.reject_threshold)
        _print_confusion(test_confusion)
    if args.report:
        Path(args.report).write_text(harness.training_report(result, test_confusion), encoding="utf-8")
    return 0


def cmd_classify(args) -> int:
    rec = harness.load_model(_require_file(args.model, "model"))
    clip, _ = load_wav(_require_file(args.wav, "WAV file"))
    if args.top_k < 1:
        raise UsageError("--top-k must be >= 1")
    for label, score in harness.classify_clip(rec, clip)[:args.top_k]:
        print(f"{label} (score = {score:.5f})")
    return 0


def cmd_evaluate(args) -> int:
    model_path = _require_file(args.model, "model")
    _require_dir(args.data_dir, "data directory")
    rec = harness.load_model(model_path)
    ds, split = _load_split(args)
    indices = split.part(args.split)
    if not indices:
        raise ValueError(f"the {args.split} split is empty; nothing to evaluate")
    confusion = harness.evaluate(rec, ds, indices, reject_threshold=args.reject_threshold)
    _print_confusion(confusion)
    if args.csv:
        Path(args.csv).write_text(confusion.to_csv(), encoding="utf-8")
    return 0


def cmd_spectrogram(args) -> int:
    clip, _ = load_wav(_require_file(args.wav, "WAV file"))
    image = spectrogram(downmix(clip), _feature_config(args), args.db_floor)
    Path(args.out_pgm).write_bytes(export_pgm(image))
    frames, bins = image.grid.shape
    print(f"wrote {args.out_pgm} ({frames} frames x {bins} bins)")
    return 0


def cmd_experiment(args) -> int:
    _require_dir(args.data_dir, "data directory")
    ds, split = _load_split(args)
    fcfg = _feature_config(args)
    try:
        cfg = harness.ExperimentConfig.grid(args.channels, args.rates, args.target_bit_depth, args.target_duration)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    def on_row(number: int, row: harness.GridRow) -> None:
        c = row.contract
        print(f"Test Case{number} ({c.target_channels}, {c.target_rate} Hz): "
              f"Validation accuracy = {row.validation_accuracy:.1f}% "
              f"Final test accuracy = {row.test_accuracy:.1f}% (N={row.test_confusion.n})")

    report = harness.run_experiment_grid(
        ds, cfg, split, fcfg, reject_threshold=args.reject_threshold, on_row=on_row, **_training_kwargs(args)
    )
    text = report.format()
    print(text, end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "results.csv").write_text(report.results_csv(), encoding="utf-8")
        (out / "class_scores.csv").write_text(report.class_scores_csv(), encoding="utf-8")
        for number, row in enumerate(report.rows, 1):
            (out / f"confusion_case{number}.csv").write_text(row.test_confusion.to_csv(), encoding="utf-8")
    return 0


def cmd_knn(args) -> int:
    _require_dir(args.data_dir, "data directory")
    ds, split = _load_split(args)
    contract, fcfg = _contract(args), _feature_config(args)
    if not split.test:
        raise ValueError("the test split is empty; nothing to evaluate")
    n_train = sum(1 for i in split.train if ds.items[i].label != harness.UNKNOWN)
    if not 1 <= args.k <= n_train:
        raise UsageError(f"--k must be between 1 and the training-set size {n_train}, got {args.k}")
    if args.pca_k is not None and not 1 <= args.pca_k <= fcfg.dim:
        raise UsageError(f"--pca-k must be between 1 and {fcfg.dim}, got {args.pca_k}")
    confusion = harness.knn_evaluate(ds, split, contract, fcfg, args.k, args.pca_k, args.standardize)
    _print_confusion(confusion)
    if args.csv:
        Path(args.csv).write_text(confusion.to_csv(), encoding="utf-8")
    return 0


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fauna", description="Species-sound recognition toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalize a dataset tree to the format contract")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--noise-dir", default=None, help="background-noise WAVs for spectral subtraction")
    p.add_argument("--noise-fft-size", type=int, default=512)
    _add_contract_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train per-class HMMs with checkpoints")
    p.add_argument("data_dir")
    p.add_argument("model_out")
    p.add_argument("--report", default=None, help="write the training report to this file")
    _add_contract_flags(p)
    _add_feature_flags(p)
    _add_split_flags(p)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="score one WAV file")
    p.add_argument("model")
    p.add_argument("wav")
    p.add_argument("--top-k", type=int, default=3)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="confusion matrix of a model on a dataset split")
    p.add_argument("model")
    p.add_argument("data_dir")
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
    p.add_argument("--csv", default=None)
    p.add_argument("--reject-threshold", type=float, default=0.0)
    _add_split_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("spectrogram", help="write a greyscale PGM spectrogram")
    p.add_argument("wav")
    p.add_argument("out_pgm")
    p.add_argument("--db-floor", type=float, default=-80.0)
    _add_feature_flags(p)
    p.set_defaults(func=cmd_spectrogram)

    p = sub.add_parser("experiment", help="run the channel x rate parameter grid")
    p.add_argument("data_dir")
    p.add_argument("--channels", nargs="+", choices=("mono", "stereo"), default=["mono", "stereo"])
    p.add_argument("--rates", nargs="+", type=int, default=[16000, 32000])
    p.add_argument("--target-bit-depth", type=int, choices=(8, 16), default=16)
    p.add_argument("--target-duration", type=float, default=1.0)
    p.add_argument("--out-dir", default=None)
    _add_feature_flags(p)
    _add_split_flags(p)
    _add_training_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("knn", help="averaged-MFCC k-nearest-neighbour classifier")
    p.add_argument("data_dir")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--pca-k", type=int, default=None)
    p.add_argument("--no-standardize", dest="standardize", action="store_false",
                   help="use raw AMFCC coordinates instead of z-scored ones")
    p.add_argument("--csv", default=None)
    _add_contract_flags(p)
    _add_feature_flags(p)
    _add_split_flags(p)
    p.set_defaults(func=cmd_knn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s:%(name)s:%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fauna {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, WavError, ModelFormatError, TrainingError) as exc:
        print(f"fauna {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
