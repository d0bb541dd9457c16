"""Dataset ingestion, hash-stable splits, checkpointed HMM training,
confusion matrices and the channel/rate parameter-grid experiment."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .audio_io import AudioClip, WavError, load_wav
from .features import FeatureConfig, FeatureMatrix, mfcc
from .hmm import (
    MODEL_MAGIC,
    ClassModel,
    EmTrainer,
    ModelFormatError,
    Recognizer,
    classify,
    dumps_recognizer,
    flat_start,
    loads_recognizer,
    priors_from_counts,
)
from .knn import AmfccVector, Standardizer, amfcc, knn_classify, pca_fit, pca_project
from .preprocess import FormatContract, NoiseProfile, apply_contract, downmix

log = logging.getLogger(__name__)

SILENCE = "_silence_"
UNKNOWN = "_unknown_"
RESERVED_LABELS = (SILENCE, UNKNOWN)
CHECKPOINT_MAGIC = "FAUNA-CKPT v1"
STEP_MAPPING_NOTE = (
    "# one training step = one Baum-Welch (EM) iteration over every class model; "
    "checkpoints are evaluated on the validation split"
)


def label_order(labels: Iterable[str]) -> list[str]:
    """Reserved labels first (silence, unknown), then the rest alphabetically."""
    labels = set(labels)
    return [r for r in RESERVED_LABELS if r in labels] + sorted(labels - set(RESERVED_LABELS))


# -- dataset -----------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetItem:
    label: str
    path: Path
    clip: AudioClip


@dataclass
class Dataset:
    items: list[DatasetItem]
    skipped: int = 0

    def __len__(self):
        return len(self.items)

    @property
    def labels(self) -> list[str]:
        return label_order(item.label for item in self.items)


def load_dataset(root) -> Dataset:
    """Read ``<root>/<label>/*.wav``; unreadable files are logged and counted, not fatal."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    items = []
    skipped = 0
    for label_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for path in sorted(p for p in label_dir.iterdir() if p.is_file() and p.suffix.lower() == ".wav"):
            try:
                clip, _ = load_wav(path)
            except (WavError, OSError, ValueError) as exc:
                log.warning("skipping %s: %s", path, exc)
                skipped += 1
                continue
            items.append(DatasetItem(label_dir.name, path, clip))
    if not items:
        raise ValueError(f"no readable WAV files under {root} (expected <root>/<label>/*.wav)")
    return Dataset(items, skipped)


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]
    fractions: tuple[float, float, float]

    def part(self, name: str) -> tuple[int, ...]:
        if name == "all":
            return tuple(sorted(self.train + self.validation + self.test))
        if name not in ("train", "validation", "test"):
            raise ValueError(f"unknown split part {name!r}")
        return getattr(self, name)


def hash_band(name: str, seed: int) -> int:
    """Stable 0..99 bucket for a file name; independent of the rest of the corpus."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % 100


def split_dataset(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Split:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    train_end = round(100 * fractions[0])
    val_end = round(100 * (fractions[0] + fractions[1]))
    parts = ([], [], [])
    for i, item in enumerate(ds.items):
        band = hash_band(item.path.name, seed)
        parts[0 if band < train_end else 1 if band < val_end else 2].append(i)
    return Split(tuple(parts[0]), tuple(parts[1]), tuple(parts[2]), fractions)


# -- features ------------------------------------------------------------------------

def clip_features(
    clip: AudioClip,
    contract: FormatContract,
    fcfg: FeatureConfig,
    profile: Optional[NoiseProfile] = None,
) -> FeatureMatrix:
    """Contract normalization then MFCCs of the mono mix."""
    return mfcc(downmix(apply_contract(clip, contract, profile)), fcfg)


def dataset_features(ds, indices, contract, fcfg, profile=None) -> dict[int, FeatureMatrix]:
    return {i: clip_features(ds.items[i].clip, contract, fcfg, profile) for i in indices}


# -- confusion matrices --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    labels: tuple[str, ...]
    counts: np.ndarray

    @classmethod
    def from_pairs(cls, labels: Sequence[str], pairs: Iterable[tuple[str, str]]) -> "ConfusionMatrix":
        labels = list(labels)
        index = {label: i for i, label in enumerate(labels)}
        counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
        for truth, predicted in pairs:
            counts[index[truth], index[predicted]] += 1
        return cls(tuple(labels), counts)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        """Fraction correct; 0.0 for an empty matrix."""
        return float(np.trace(self.counts)) / self.n if self.n else 0.0

    @property
    def off_diagonal_fraction(self) -> float:
        return 1.0 - self.accuracy if self.n else 0.0

    def format(self) -> str:
        return np.array2string(self.counts, max_line_width=10**6, separator=" ")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["truth\\predicted", *self.labels])
        for label, row in zip(self.labels, self.counts):
            writer.writerow([label, *(int(v) for v in row)])
        return buf.getvalue()


def format_accuracy(fraction: float) -> str:
    return f"{100.0 * fraction:.1f}%"


def predict(rec: Recognizer, features, reject_threshold: float = 0.0) -> tuple[str, list[tuple[str, float]]]:
    ranked = classify(rec, features)
    label, score = ranked[0]
    if score < reject_threshold:
        label = UNKNOWN
    return label, ranked


def _matrix_labels(rec: Recognizer, truths: Iterable[str], reject_threshold: float) -> list[str]:
    labels = set(rec.labels) | set(truths)
    if reject_threshold > 0:
        labels.add(UNKNOWN)
    return label_order(labels)


def confusion_from_features(
    rec: Recognizer,
    features: Sequence,
    truths: Sequence[str],
    reject_threshold: float = 0.0,
) -> ConfusionMatrix:
    pairs = [(truth, predict(rec, f, reject_threshold)[0]) for f, truth in zip(features, truths)]
    return ConfusionMatrix.from_pairs(_matrix_labels(rec, truths, reject_threshold), pairs)


def evaluate(
    rec: Recognizer,
    ds: Dataset,
    indices: Sequence[int],
    contract: Optional[FormatContract] = None,
    fcfg: Optional[FeatureConfig] = None,
    reject_threshold: float = 0.0,
    profile: Optional[NoiseProfile] = None,
) -> ConfusionMatrix:
    if not indices:
        raise ValueError("cannot evaluate on an empty set of clips")
    contract = contract or rec.contract
    fcfg = fcfg or rec.feature_config
    feats = [clip_features(ds.items[i].clip, contract, fcfg, profile) for i in indices]
    return confusion_from_features(rec, feats, [ds.items[i].label for i in indices], reject_threshold)


def classify_clip(rec: Recognizer, clip: AudioClip, profile: Optional[NoiseProfile] = None):
    return classify(rec, clip_features(clip, rec.contract, rec.feature_config, profile))


def true_class_scores(rec: Recognizer, labelled_clips: Iterable[tuple[str, AudioClip]]) -> list[float]:
    """Softmax score the recognizer gives each clip's own label."""
    scores = []
    for label, clip in labelled_clips:
        scores.append(dict(classify_clip(rec, clip)).get(label, 0.0))
    return scores


# -- averaged-MFCC k-NN ------------------------------------------------------------

def knn_evaluate(
    ds: Dataset,
    split: Split,
    contract: FormatContract = FormatContract(),
    fcfg: FeatureConfig = FeatureConfig(),
    k: int = 1,
    pca_k: Optional[int] = None,
    standardize: bool = True,
    profile: Optional[NoiseProfile] = None,
) -> ConfusionMatrix:
    """AMFCC embeddings (optionally z-scored, then PCA-reduced) voted by k-NN;
    fitted on the training split, scored on the test split."""
    if not split.test:
        raise ValueError("the test split is empty; nothing to evaluate")

    def embed(i: int) -> AmfccVector:
        item = ds.items[i]
        return amfcc(clip_features(item.clip, contract, fcfg, profile), item.label)

    train = [embed(i) for i in split.train if ds.items[i].label != UNKNOWN]
    test = [embed(i) for i in split.test]
    if not 1 <= k <= len(train):
        raise ValueError(f"k must be between 1 and the training-set size {len(train)}, got {k}")
    if standardize:
        scaler = Standardizer.fit(train)
        train, test = [scaler(v) for v in train], [scaler(v) for v in test]
    if pca_k is not None:
        pca = pca_fit(train, pca_k)
        train = [AmfccVector(pca_project(pca, v), v.label) for v in train]
        test = [AmfccVector(pca_project(pca, v), v.label) for v in test]
    pairs = [(v.label, knn_classify(train, v, k)[0]) for v in test]
    return ConfusionMatrix.from_pairs(label_order({v.label for v in train} | {v.label for v in test}), pairs)


# -- training with checkpoints -------------------------------------------------------

@dataclass(eq=False)
class Checkpoint:
    step: int
    validation_accuracy: float  # percent
    confusion: Optional[ConfusionMatrix]
    recognizer: Recognizer

    @property
    def log_line(self) -> str:
        n = self.confusion.n if self.confusion is not None else 0
        return f"Step {self.step}: Validation accuracy = {self.validation_accuracy:.1f}% (N={n})"


@dataclass(eq=False)
class TrainingResult:
    recognizer: Recognizer
    checkpoints: list[Checkpoint]
    best: Checkpoint
    log_likelihoods: dict[str, list[float]] = field(default_factory=dict)


def train_recognizer(
    ds: Dataset,
    split: Split,
    contract: FormatContract = FormatContract(),
    fcfg: FeatureConfig = FeatureConfig(),
    n_states: int = 5,
    max_iters: int = 50,
    eval_every: int = 5,
    rel_tol: float = 1e-5,
    grammar_scale: float = 1.0,
    reject_threshold: float = 0.0,
    variance_floor: float = 1e-3,
    profile: Optional[NoiseProfile] = None,
    on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
) -> TrainingResult:
    """Flat-start and EM-train one HMM per class, in lockstep.

    A checkpoint (validation confusion matrix + recognizer snapshot) is taken
    at step 0, every ``eval_every`` steps, and at the last step. The returned
    recognizer is the one from the checkpoint with the best validation
    accuracy, the latest one winning ties.
    """
    if eval_every < 1 or max_iters < 0:
        raise ValueError("eval_every must be >= 1 and max_iters >= 0")
    by_label: dict[str, list[FeatureMatrix]] = {}
    for i in split.train:
        item = ds.items[i]
        if item.label == UNKNOWN:
            continue
        feats = clip_features(item.clip, contract, fcfg, profile)
        if len(feats) >= n_states:
            by_label.setdefault(item.label, []).append(feats)
    missing = [label for label in ds.labels if label != UNKNOWN and label not in by_label]
    if missing:
        raise ValueError(f"no trainable clip (>= {n_states} frames) in the training split for {missing}")
    labels = label_order(by_label)
    log_priors = priors_from_counts({label: len(by_label[label]) for label in labels})

    trainers = {label: EmTrainer(flat_start(by_label[label], n_states, variance_floor), by_label[label], rel_tol)
                for label in labels}
    val_feats = [clip_features(ds.items[i].clip, contract, fcfg, profile) for i in split.validation]
    val_truths = [ds.items[i].label for i in split.validation]

    def snapshot(step: int) -> Checkpoint:
        rec = Recognizer(
            tuple(ClassModel(label, trainers[label].model, log_priors[label]) for label in labels),
            grammar_scale, fcfg, contract,
        )
        if val_feats:
            confusion = confusion_from_features(rec, val_feats, val_truths, reject_threshold)
            accuracy = 100.0 * confusion.accuracy
        else:
            confusion, accuracy = None, 0.0
        ckpt = Checkpoint(step, accuracy, confusion, rec)
        if on_checkpoint is not None:
            on_checkpoint(ckpt)
        return ckpt

    checkpoints = [snapshot(0)]
    for step in range(1, max_iters + 1):
        for trainer in trainers.values():
            trainer.step()
        done = all(t.converged for t in trainers.values())
        if step % eval_every == 0 or step == max_iters or done:
            checkpoints.append(snapshot(step))
        if done:
            break
    best = max(reversed(checkpoints), key=lambda c: c.validation_accuracy)
    return TrainingResult(
        best.recognizer, checkpoints, best, {label: list(t.history) for label, t in trainers.items()}
    )


def training_report(result: TrainingResult, test_confusion: Optional[ConfusionMatrix] = None) -> str:
    lines = [STEP_MAPPING_NOTE]
    lines += [c.log_line for c in result.checkpoints]
    lines.append(f"Best checkpoint: step {result.best.step}")
    if test_confusion is not None:
        lines.append(f"set_size={test_confusion.n}")
        lines.append("Confusion Matrix:")
        lines.append(test_confusion.format())
        lines.append(final_accuracy_line(test_confusion))
    return "\n".join(lines) + "\n"


def final_accuracy_line(confusion: ConfusionMatrix) -> str:
    return f"Final test accuracy = {format_accuracy(confusion.accuracy)} (N={confusion.n})"


# -- checkpoint files ----------------------------------------------------------------

def dumps_checkpoint(ckpt: Checkpoint) -> str:
    lines = [CHECKPOINT_MAGIC, f"step {ckpt.step}", f"validation_accuracy {float(ckpt.validation_accuracy)!r}"]
    if ckpt.confusion is not None:
        lines.append("confusion_labels " + " ".join(ckpt.confusion.labels))
        lines += ["confusion_row " + " ".join(str(int(v)) for v in row) for row in ckpt.confusion.counts]
    return "\n".join(lines) + "\n" + dumps_recognizer(ckpt.recognizer)


def loads_checkpoint(text: str) -> Checkpoint:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        found = lines[0].strip() if lines else ""
        raise ModelFormatError(f"unsupported checkpoint version: expected {CHECKPOINT_MAGIC!r}, found {found!r}")
    try:
        step = int(lines[1].split()[1]) if lines[1].startswith("step ") else None
        accuracy = float(lines[2].split()[1]) if lines[2].startswith("validation_accuracy ") else None
    except (IndexError, ValueError):
        raise ModelFormatError("malformed checkpoint header") from None
    if step is None or accuracy is None:
        raise ModelFormatError("checkpoint header must list step and validation_accuracy")
    pos = 3
    confusion = None
    if pos < len(lines) and lines[pos].startswith("confusion_labels "):
        labels = lines[pos].split()[1:]
        rows = [[int(v) for v in line.split()[1:]] for line in lines[pos + 1:pos + 1 + len(labels)]]
        confusion = ConfusionMatrix(tuple(labels), np.array(rows, dtype=np.int64).reshape(len(labels), len(labels)))
        pos += 1 + len(labels)
    rec = loads_recognizer("\n".join(lines[pos:]) + "\n")
    return Checkpoint(step, accuracy, confusion, rec)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_text(dumps_checkpoint(ckpt), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_text(encoding="utf-8"))


def load_model(path) -> Recognizer:
    """Load either a bare recognizer file or a checkpoint."""
    text = Path(path).read_text(encoding="utf-8")
    if text.startswith(CHECKPOINT_MAGIC):
        return loads_checkpoint(text).recognizer
    if text.startswith(MODEL_MAGIC):
        return loads_recognizer(text)
    first = text.splitlines()[0] if text else ""
    raise ModelFormatError(f"unsupported model version: {first!r}")


# -- parameter grid ------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    cells: tuple[FormatContract, ...]

    def __post_init__(self):
        if not self.cells:
            raise ValueError("experiment grid must have at least one cell")

    @classmethod
    def grid(cls, channels=("mono", "stereo"), rates=(16000, 32000), bit_depth: int = 16,
             duration: float = 1.0) -> "ExperimentConfig":
        """Rate-major ordering: mono/16k, stereo/16k, mono/32k, stereo/32k."""
        return cls(tuple(FormatContract(r, ch, duration, bit_depth) for r in rates for ch in channels))


@dataclass(eq=False)
class GridRow:
    contract: FormatContract
    validation_accuracy: float  # percent
    test_confusion: ConfusionMatrix
    class_scores: dict[str, float]  # mean true-class score over each class's test clips
    recognizer: Recognizer

    @property
    def test_accuracy(self) -> float:
        return 100.0 * self.test_confusion.accuracy


@dataclass(eq=False)
class ExperimentReport:
    rows: list[GridRow]

    @property
    def labels(self) -> list[str]:
        return label_order({label for row in self.rows for label in row.class_scores})

    def table_parameters(self) -> str:
        lines = ["Test Case\tSampling Channel\tFrequency\tRate"]
        for i, row in enumerate(self.rows, 1):
            c = row.contract
            lines.append(f"Test Case{i}\t{c.target_channels.capitalize()}\t{c.target_rate} Hz\t{c.target_bit_depth}")
        return "\n".join(lines)

    def table_results(self) -> str:
        lines = ["Test Case\tValidation Accuracy\tOverall Accuracy"]
        for i, row in enumerate(self.rows, 1):
            lines.append(f"Test Case{i}\t{row.validation_accuracy:.1f}\t{row.test_accuracy:.1f}")
        return "\n".join(lines)

    def table_class_scores(self) -> str:
        labels = self.labels
        lines = ["Test Case\t" + "\t".join(labels)]
        for i, row in enumerate(self.rows, 1):
            cells = [f"{row.class_scores[l]:.5f}" if l in row.class_scores else "--" for l in labels]
            lines.append(f"Test Case{i}\t" + "\t".join(cells))
        return "\n".join(lines)

    def results_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["case", "channels", "rate_hz", "bit_depth", "validation_accuracy", "test_accuracy", "test_n"])
        for i, row in enumerate(self.rows, 1):
            c = row.contract
            writer.writerow([i, c.target_channels, c.target_rate, c.target_bit_depth,
                             f"{row.validation_accuracy:.1f}", f"{row.test_accuracy:.1f}", row.test_confusion.n])
        return buf.getvalue()

    def class_scores_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        labels = self.labels
        writer.writerow(["case", *labels])
        for i, row in enumerate(self.rows, 1):
            writer.writerow([i, *(f"{row.class_scores[l]:.5f}" if l in row.class_scores else "" for l in labels)])
        return buf.getvalue()

    def format(self) -> str:
        return "\n\n".join([
            STEP_MAPPING_NOTE,
            "Considered Parameters\n" + self.table_parameters(),
            "Output Results\n" + self.table_results(),
            "Testing on Individual Audio Datasets (mean score of the true class)\n" + self.table_class_scores(),
        ]) + "\n"


def run_experiment_grid(
    ds: Dataset,
    cfg: ExperimentConfig,
    split: Split,
    fcfg: FeatureConfig = FeatureConfig(),
    reject_threshold: float = 0.0,
    profile: Optional[NoiseProfile] = None,
    on_row: Optional[Callable[[int, GridRow], None]] = None,
    **train_kwargs,
) -> ExperimentReport:
    """Train and test one recognizer per grid cell on a shared split."""
    if not split.test:
        raise ValueError("the experiment grid needs a nonempty test split")
    rows = []
    for number, contract in enumerate(cfg.cells, 1):
        result = train_recognizer(ds, split, contract, fcfg, reject_threshold=reject_threshold,
                                  profile=profile, **train_kwargs)
        rec = result.recognizer
        feats = [clip_features(ds.items[i].clip, contract, fcfg, profile) for i in split.test]
        truths = [ds.items[i].label for i in split.test]
        confusion = confusion_from_features(rec, feats, truths, reject_threshold)
        per_class: dict[str, list[float]] = {}
        for f, truth in zip(feats, truths):
            per_class.setdefault(truth, []).append(dict(classify(rec, f)).get(truth, 0.0))
        scores = {label: float(np.mean(v)) for label, v in per_class.items()}
        row = GridRow(contract, result.best.validation_accuracy, confusion, scores, rec)
        rows.append(row)
        if on_row is not None:
            on_row(number, row)
    return ExperimentReport(rows)
