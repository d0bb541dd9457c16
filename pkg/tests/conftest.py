import itertools
import math

import numpy as np
import pytest

from fauna.hmm import HmmModel
from fauna.synth import write_corpus

_ACCEPTANCE = {}


def random_model(rng, n_states, dim, floor=1e-3):
    """Random left-to-right model with entry on state 0."""
    entry = np.full(n_states, -np.inf)
    entry[0] = 0.0
    trans = np.full((n_states, n_states), -np.inf)
    exit_ = np.full(n_states, -np.inf)
    for i in range(n_states):
        if i + 1 < n_states:
            p = rng.dirichlet([1.0, 1.0, 0.3])  # stay, next, exit
            trans[i, i], trans[i, i + 1] = np.log(p[0]), np.log(p[1])
            exit_[i] = np.log(p[2])
        else:
            stay = rng.uniform(0.1, 0.9)
            trans[i, i], exit_[i] = np.log(stay), np.log1p(-stay)
    means = rng.normal(0.0, 2.0, (n_states, dim))
    variances = rng.uniform(0.3, 2.0, (n_states, dim))
    return HmmModel(entry, trans, exit_, means, variances, floor)


def brute_force(model, y):
    """Enumerate every state sequence in the linear domain.

    Returns (total probability, best probability, best path) computed with
    plain Python arithmetic, independently of the library recursions.
    """
    n = model.n_states
    entry = np.exp(model.log_entry)
    trans = np.exp(model.log_trans)
    exit_ = np.exp(model.log_exit)

    def density(j, obs):
        p = 1.0
        for mu, var, x in zip(model.means[j], model.variances[j], obs):
            p *= math.exp(-((x - mu) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)
        return p

    total, best, best_path = 0.0, -1.0, None
    for path in itertools.product(range(n), repeat=len(y)):
        p = entry[path[0]] * density(path[0], y[0])
        for t in range(1, len(y)):
            p *= trans[path[t - 1], path[t]] * density(path[t], y[t])
        p *= exit_[path[-1]]
        total += p
        if p > best:
            best, best_path = p, path
    return total, best, best_path


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root, clips_per_class=30, rate=16000, snr_db=20.0, seed=0)
    return root


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_corpus")
    write_corpus(root, clips_per_class=8, rate=16000, snr_db=20.0, seed=1)
    return root


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    failed = report.failed
    if report.when == "call" or failed:
        _ACCEPTANCE[name] = _ACCEPTANCE.get(name, True) and not failed


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): headline acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _ACCEPTANCE.items():
        terminalreporter.write_line(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}")
