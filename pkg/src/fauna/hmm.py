"""Left-to-right Gaussian HMMs: likelihoods, Viterbi decoding, flat start,
Baum-Welch re-estimation and the prior-weighted argmax recognizer.

All probabilities are handled as natural logs; impossible transitions are
``-inf``. Feature sequences are anything convertible to a ``T x D`` array
(``FeatureMatrix`` included).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .features import FeatureConfig
from .preprocess import FormatContract

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_VARIANCE_FLOOR = 1e-3
STOCHASTIC_TOL = 1e-9


class TrainingError(RuntimeError):
    """EM produced a non-finite likelihood."""


@dataclass(frozen=True, eq=False)
class GaussianEmission:
    mean: np.ndarray
    variance: np.ndarray
    variance_floor: float = DEFAULT_VARIANCE_FLOOR

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.variance, dtype=np.float64)
        if mean.shape != var.shape or mean.ndim != 1:
            raise ValueError(f"mean {mean.shape} and variance {var.shape} must be equal-length vectors")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise ValueError("emission parameters must be finite")
        if np.any(var < self.variance_floor):
            raise ValueError(f"variances must be >= floor {self.variance_floor}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)


def emission_logpdf(g: GaussianEmission, y) -> float:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != g.mean.shape:
        raise ValueError(f"observation has dimension {y.shape}, emission expects {g.mean.shape}")
    return float(np.sum(-0.5 * (LOG_2PI + np.log(g.variance)) - (y - g.mean) ** 2 / (2.0 * g.variance)))


@dataclass(frozen=True, eq=False)
class HmmModel:
    """Strictly left-to-right HMM with explicit entry and exit transitions.

    Row ``i`` of ``exp(log_trans)`` plus ``exp(log_exit[i])`` sums to one.
    Emissions are diagonal Gaussians stored as ``means``/``variances`` (N x D).
    """

    log_entry: np.ndarray
    log_trans: np.ndarray
    log_exit: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    variance_floor: float = DEFAULT_VARIANCE_FLOOR

    def __post_init__(self):
        arrays = {}
        for name in ("log_entry", "log_trans", "log_exit", "means", "variances"):
            arrays[name] = np.array(getattr(self, name), dtype=np.float64)
            arrays[name].setflags(write=False)
            object.__setattr__(self, name, arrays[name])
        n = self.log_entry.shape[0]
        if n < 1 or self.log_trans.shape != (n, n) or self.log_exit.shape != (n,):
            raise ValueError("inconsistent state counts in entry/transition/exit arrays")
        if self.means.shape != self.variances.shape or self.means.shape[0] != n:
            raise ValueError("means and variances must both be n_states x D")
        if not (np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.variances))):
            raise ValueError("emission parameters must be finite")
        if np.any(self.variances < self.variance_floor):
            raise ValueError(f"variances must be >= floor {self.variance_floor}")
        i, j = np.indices((n, n))
        if np.any(np.isfinite(self.log_trans[(j != i) & (j != i + 1)])):
            raise ValueError("transitions must be left-to-right (self-loop or next state only)")
        if np.any(np.isfinite(self.log_entry[1:])):
            raise ValueError("entry probability must be concentrated on state 0")
        if abs(np.exp(self.log_entry).sum() - 1.0) > STOCHASTIC_TOL:
            raise ValueError("entry probabilities must sum to 1")
        rows = np.exp(self.log_trans).sum(axis=1) + np.exp(self.log_exit)
        if np.any(np.abs(rows - 1.0) > STOCHASTIC_TOL):
            raise ValueError(f"outgoing probabilities must sum to 1 per state, got {rows}")

    @property
    def n_states(self) -> int:
        return self.log_entry.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def emissions(self) -> list[GaussianEmission]:
        return [GaussianEmission(m, v, self.variance_floor) for m, v in zip(self.means, self.variances)]

    def emission_matrix(self, features) -> np.ndarray:
        """``B[t, j] = log b_j(y_t)`` for every frame and state."""
        y = _as_features(features, self.dim)
        var = self.variances
        const = -0.5 * (self.dim * LOG_2PI + np.log(var).sum(axis=1))
        diff = y[:, None, :] - self.means[None, :, :]
        return const[None, :] - 0.5 * np.sum(diff * diff / var[None, :, :], axis=2)


def _as_features(features, dim: Optional[int] = None) -> np.ndarray:
    y = np.asarray(features, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError(f"features must be T x D with T >= 1, got shape {y.shape}")
    if dim is not None and y.shape[1] != dim:
        raise ValueError(f"features have dimension {y.shape[1]}, model expects {dim}")
    return y


@dataclass(frozen=True)
class StatePath:
    states: tuple[int, ...]

    def __post_init__(self):
        s = tuple(int(v) for v in self.states)
        object.__setattr__(self, "states", s)
        if any(b - a not in (0, 1) for a, b in zip(s, s[1:])):
            raise ValueError(f"state path must be nondecreasing with unit steps, got {s}")

    def __len__(self):
        return len(self.states)


def path_log_likelihood(model: HmmModel, features, path: StatePath) -> float:
    B = model.emission_matrix(features)
    states = path.states if isinstance(path, StatePath) else tuple(path)
    if len(states) != B.shape[0]:
        raise ValueError(f"path has {len(states)} states for {B.shape[0]} frames")
    if any(not 0 <= s < model.n_states for s in states):
        raise ValueError(f"path visits a state outside 0..{model.n_states - 1}")
    terms = [model.log_entry[states[0]]]
    for t, s in enumerate(states):
        terms.append(B[t, s])
        terms.append(model.log_trans[s, states[t + 1]] if t + 1 < len(states) else model.log_exit[s])
    total = float(sum(terms))
    if total == -np.inf:
        raise ValueError(f"path {states} is impossible under the model topology")
    return total


def _bands(model: HmmModel) -> tuple[np.ndarray, np.ndarray]:
    """Self-loop and next-state log probabilities (the only nonzero transitions)."""
    return np.diagonal(model.log_trans).copy(), np.diagonal(model.log_trans, 1).copy()


def _forward(model: HmmModel, B: np.ndarray) -> np.ndarray:
    T, N = B.shape
    stay, move = _bands(model)
    alpha = np.empty((T, N))
    alpha[0] = model.log_entry + B[0]
    arrive = np.full(N, -np.inf)
    for t in range(1, T):
        prev = alpha[t - 1]
        arrive[1:] = prev[:-1] + move
        alpha[t] = np.logaddexp(prev + stay, arrive) + B[t]
    return alpha


def _backward(model: HmmModel, B: np.ndarray) -> np.ndarray:
    T, N = B.shape
    stay, move = _bands(model)
    beta = np.empty((T, N))
    beta[-1] = model.log_exit
    leave = np.full(N, -np.inf)
    for t in range(T - 2, -1, -1):
        ahead = B[t + 1] + beta[t + 1]
        leave[:-1] = move + ahead[1:]
        beta[t] = np.logaddexp(stay + ahead, leave)
    return beta


def forward_log_likelihood(model: HmmModel, features) -> float:
    """log p(Y | model), summed over every state path."""
    alpha = _forward(model, model.emission_matrix(features))
    return float(logsumexp(alpha[-1] + model.log_exit))


def viterbi(model: HmmModel, features) -> tuple[StatePath, float]:
    B = model.emission_matrix(features)
    T, N = B.shape
    if T < N:
        raise ValueError(f"{T} frames cannot traverse a {N}-state left-to-right model")
    delta = model.log_entry + B[0]
    back = np.zeros((T, N), dtype=np.int64)
    for t in range(1, T):
        scores = delta[:, None] + model.log_trans
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(N)] + B[t]
    final = delta + model.log_exit
    state = int(np.argmax(final))
    logprob = float(final[state])
    states = [state]
    for t in range(T - 1, 0, -1):
        state = int(back[t, state])
        states.append(state)
    return StatePath(tuple(reversed(states))), logprob


def _transition_arrays(n_states: int, stay: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore"):
        entry = np.log(np.eye(1, n_states)[0])
        trans = np.full((n_states, n_states), -np.inf)
        exit_ = np.full(n_states, -np.inf)
    for i in range(n_states):
        trans[i, i] = math.log(stay)
        if i + 1 < n_states:
            trans[i, i + 1] = math.log(1.0 - stay)
        else:
            exit_[i] = math.log(1.0 - stay)
    return entry, trans, exit_


def flat_start(
    features: Sequence, n_states: int, variance_floor: float = DEFAULT_VARIANCE_FLOOR
) -> HmmModel:
    """Uniform segmentation of every clip into ``n_states`` spans, pooled Gaussian
    statistics per span, and equal self/next transition probabilities."""
    if n_states < 1:
        raise ValueError(f"n_states must be >= 1, got {n_states}")
    seqs = [_as_features(f) for f in features]
    if not seqs:
        raise ValueError("flat_start needs at least one training sequence")
    dims = {s.shape[1] for s in seqs}
    if len(dims) != 1:
        raise ValueError(f"training sequences have mixed dimensions {sorted(dims)}")
    pooled = [[] for _ in range(n_states)]
    for k, seq in enumerate(seqs):
        if len(seq) < n_states:
            raise ValueError(f"sequence {k} has {len(seq)} frames, fewer than {n_states} states")
        for state, span in enumerate(np.array_split(seq, n_states)):
            pooled[state].append(span)
    stacked = [np.vstack(p) for p in pooled]
    means = np.array([s.mean(axis=0) for s in stacked])
    variances = np.maximum(np.array([s.var(axis=0) for s in stacked]), variance_floor)
    entry, trans, exit_ = _transition_arrays(n_states, 0.5)
    return HmmModel(entry, trans, exit_, means, variances, variance_floor)


@dataclass
class _Stats:
    log_likelihood: float = 0.0
    entry: np.ndarray = None
    trans: np.ndarray = None
    exit: np.ndarray = None
    occupancy: np.ndarray = None
    first: np.ndarray = None
    second: np.ndarray = None


def _expectations(model: HmmModel, seqs: Sequence[np.ndarray]) -> _Stats:
    N, D = model.n_states, model.dim
    st = _Stats(0.0, np.zeros(N), np.zeros((N, N)), np.zeros(N), np.zeros(N), np.zeros((N, D)), np.zeros((N, D)))
    for y in seqs:
        B = model.emission_matrix(y)
        alpha = _forward(model, B)
        beta = _backward(model, B)
        ll = float(logsumexp(alpha[-1] + model.log_exit))
        if not np.isfinite(ll):
            st.log_likelihood = ll
            return st
        st.log_likelihood += ll
        gamma = np.exp(alpha + beta - ll)
        st.entry += gamma[0]
        st.exit += np.exp(alpha[-1] + model.log_exit - ll)
        if len(y) > 1:
            stay, move = _bands(model)
            ahead = B[1:] + beta[1:]
            idx = np.arange(N)
            st.trans[idx, idx] += np.exp(alpha[:-1] + stay + ahead - ll).sum(axis=0)
            if N > 1:
                st.trans[idx[:-1], idx[1:]] += np.exp(alpha[:-1, :-1] + move + ahead[:, 1:] - ll).sum(axis=0)
        st.occupancy += gamma.sum(axis=0)
        st.first += gamma.T @ y
        st.second += gamma.T @ (y * y)
    return st


def _maximize(model: HmmModel, st: _Stats, n_seqs: int) -> HmmModel:
    floor = model.variance_floor
    occ = st.occupancy
    used = occ > 1e-300
    means = model.means.copy()
    variances = model.variances.copy()
    means[used] = st.first[used] / occ[used, None]
    variances[used] = np.maximum(st.second[used] / occ[used, None] - means[used] ** 2, floor)

    outgoing = st.trans.sum(axis=1) + st.exit
    with np.errstate(divide="ignore", invalid="ignore"):
        log_trans = np.where(outgoing[:, None] > 0, np.log(st.trans) - np.log(outgoing)[:, None], model.log_trans)
        log_exit = np.where(outgoing > 0, np.log(st.exit) - np.log(outgoing), model.log_exit)
        log_entry = np.log(st.entry / n_seqs)
    # renormalize away rounding so rows sum to one to machine precision
    norm = logsumexp(np.column_stack([log_trans, log_exit]), axis=1)
    log_trans = log_trans - norm[:, None]
    log_exit = log_exit - norm
    log_entry = log_entry - logsumexp(log_entry)
    return HmmModel(log_entry, log_trans, log_exit, means, variances, floor)


def em_step(model: HmmModel, features: Sequence) -> tuple[HmmModel, float]:
    """One Baum-Welch update. Returns the new model and the log-likelihood of
    the data under the *input* model."""
    seqs = [_as_features(f, model.dim) for f in features]
    if not seqs:
        raise ValueError("EM needs at least one training sequence")
    st = _expectations(model, seqs)
    if not np.isfinite(st.log_likelihood):
        return model, st.log_likelihood
    return _maximize(model, st, len(seqs)), st.log_likelihood


def total_log_likelihood(model: HmmModel, features: Sequence) -> float:
    return float(sum(forward_log_likelihood(model, f) for f in features))


def em_train(
    model: HmmModel,
    features: Sequence,
    max_iters: int = 50,
    rel_tol: float = 1e-5,
) -> tuple[HmmModel, list[float]]:
    """Baum-Welch until ``max_iters`` or a relative likelihood gain below ``rel_tol``.

    The returned list holds the total log-likelihood after each iteration.
    """
    trainer = EmTrainer(model, features, rel_tol)
    for _ in range(max_iters):
        trainer.step()
        if trainer.converged:
            break
    return trainer.model, list(trainer.history)


class EmTrainer:
    """Incremental EM driver, so callers can interleave evaluation with training."""

    def __init__(self, model: HmmModel, features: Sequence, rel_tol: float = 1e-5):
        self.features = [_as_features(f, model.dim) for f in features]
        self.rel_tol = rel_tol
        self.model = model
        self.history: list[float] = []
        self.converged = False
        self._pending, self._current_ll = em_step(model, self.features)
        if not np.isfinite(self._current_ll):
            raise TrainingError("non-finite log-likelihood for the initial model (iteration 0)")
        self.initial_log_likelihood = self._current_ll

    @property
    def iterations(self) -> int:
        return len(self.history)

    def step(self) -> float:
        if self.converged:
            return self.history[-1]
        updated = self._pending
        self._pending, new_ll = em_step(updated, self.features)
        if not np.isfinite(new_ll):
            raise TrainingError(f"non-finite log-likelihood at iteration {self.iterations + 1}")
        gain = (new_ll - self._current_ll) / max(abs(self._current_ll), 1e-300)
        self.model = updated
        self.history.append(new_ll)
        self._current_ll = new_ll
        if gain < self.rel_tol:
            self.converged = True
        return new_ll


# -- recognizer -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClassModel:
    label: str
    hmm: HmmModel
    log_prior: float

    def __post_init__(self):
        if not self.label or any(c.isspace() for c in self.label):
            raise ValueError(f"class label must be nonempty without whitespace, got {self.label!r}")


@dataclass(frozen=True, eq=False)
class Recognizer:
    classes: tuple[ClassModel, ...]
    grammar_scale: float = 1.0
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    contract: FormatContract = field(default_factory=FormatContract)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        labels = [c.label for c in self.classes]
        if len(labels) < 2:
            raise ValueError("a recognizer needs at least two classes")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate class labels in {labels}")
        total = sum(math.exp(c.log_prior) for c in self.classes)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"class priors must sum to 1, got {total}")
        if len({c.hmm.dim for c in self.classes}) != 1:
            raise ValueError("all class models must share one feature dimension")

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.classes]


def priors_from_counts(counts: dict[str, int]) -> dict[str, float]:
    total = sum(counts.values())
    return {label: math.log(n / total) for label, n in counts.items()}


def classify(rec: Recognizer, features) -> list[tuple[str, float]]:
    """Softmax over ``log p(Y|w) + s * log P(w)``, best first (ties by label)."""
    dim = rec.classes[0].hmm.dim
    y = _as_features(features, dim)
    labels = [c.label for c in rec.classes]
    scores = np.array([forward_log_likelihood(c.hmm, y) + rec.grammar_scale * c.log_prior for c in rec.classes])
    if np.all(scores == -np.inf):
        probs = np.full(len(scores), 1.0 / len(scores))
    else:
        probs = np.exp(scores - logsumexp(scores))
    return sorted(zip(labels, probs.tolist()), key=lambda lp: (-lp[1], lp[0]))


# -- serialization ----------------------------------------------------------------

MODEL_MAGIC = "FAUNA-HMM v1"


class ModelFormatError(ValueError):
    """Unreadable or wrong-version model text."""


def _floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def dumps_recognizer(rec: Recognizer) -> str:
    c = rec.contract
    lines = [
        MODEL_MAGIC,
        f"grammar_scale {float(rec.grammar_scale)!r}",
        f"features {rec.feature_config.to_text()}",
        f"contract target_rate={c.target_rate} target_channels={c.target_channels} "
        f"target_duration={float(c.target_duration)!r} target_bit_depth={c.target_bit_depth}",
        f"classes {len(rec.classes)}",
    ]
    for cm in rec.classes:
        h = cm.hmm
        lines += [
            f"class {cm.label}",
            f"log_prior {float(cm.log_prior)!r}",
            f"states {h.n_states} dim {h.dim} variance_floor {float(h.variance_floor)!r}",
            f"entry {_floats(h.log_entry)}",
            f"exit {_floats(h.log_exit)}",
        ]
        lines += [f"trans {_floats(row)}" for row in h.log_trans]
        lines += [f"mean {_floats(row)}" for row in h.means]
        lines += [f"var {_floats(row)}" for row in h.variances]
        lines.append("end")
    return "\n".join(lines) + "\n"


class _LineReader:
    def __init__(self, lines: list[str]):
        self.lines = lines
        self.pos = 0

    def take(self, key: str) -> str:
        if self.pos >= len(self.lines):
            raise ModelFormatError(f"unexpected end of model text, expected {key!r}")
        line = self.lines[self.pos]
        self.pos += 1
        head, _, rest = line.partition(" ")
        if head != key:
            raise ModelFormatError(f"line {self.pos}: expected {key!r}, found {head!r}")
        return rest

    def vector(self, key: str, length: int) -> np.ndarray:
        rest = self.take(key)
        try:
            values = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise ModelFormatError(f"line {self.pos}: {exc}") from None
        if len(values) != length:
            raise ModelFormatError(f"line {self.pos}: {key} has {len(values)} values, expected {length}")
        return values


def _parse_contract(text: str) -> FormatContract:
    fields_ = dict(item.partition("=")[::2] for item in text.split())
    try:
        return FormatContract(
            target_rate=int(fields_["target_rate"]),
            target_channels=fields_["target_channels"],
            target_duration=float(fields_["target_duration"]),
            target_bit_depth=int(fields_["target_bit_depth"]),
        )
    except KeyError as exc:
        raise ModelFormatError(f"contract line missing field {exc}") from None


def loads_recognizer(text: str) -> Recognizer:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MODEL_MAGIC:
        found = lines[0].strip() if lines else ""
        raise ModelFormatError(f"unsupported model version: expected {MODEL_MAGIC!r}, found {found!r}")
    r = _LineReader(lines)
    r.pos = 1
    try:
        scale = float(r.take("grammar_scale"))
        fcfg = FeatureConfig.from_text(r.take("features"))
        contract = _parse_contract(r.take("contract"))
        n_classes = int(r.take("classes"))
        classes = []
        for _ in range(n_classes):
            label = r.take("class")
            log_prior = float(r.take("log_prior"))
            parts = r.take("states").split()
            if len(parts) != 5 or parts[1] != "dim" or parts[3] != "variance_floor":
                raise ModelFormatError(f"line {r.pos}: malformed states line")
            n, dim, floor = int(parts[0]), int(parts[2]), float(parts[4])
            entry = r.vector("entry", n)
            exit_ = r.vector("exit", n)
            trans = np.array([r.vector("trans", n) for _ in range(n)])
            means = np.array([r.vector("mean", dim) for _ in range(n)])
            variances = np.array([r.vector("var", dim) for _ in range(n)])
            r.take("end")
            classes.append(ClassModel(label, HmmModel(entry, trans, exit_, means, variances, floor), log_prior))
    except ModelFormatError:
        raise
    except ValueError as exc:
        raise ModelFormatError(f"line {r.pos}: {exc}") from None
    return Recognizer(tuple(classes), scale, fcfg, contract)
