import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import pdist
from scipy.stats import special_ortho_group

from fauna.knn import (
    AmfccVector,
    Standardizer,
    amfcc,
    knn_classify,
    pca_fit,
    pca_project,
    vectors_from_csv,
    vectors_to_csv,
)


def labelled(points, labels):
    return [AmfccVector(np.asarray(p, dtype=float), l) for p, l in zip(points, labels)]


# -- amfcc -------------------------------------------------------------------------

def test_amfcc_examples():
    np.testing.assert_array_equal(amfcc(np.array([[1.0, 2.0]])).values, [1.0, 2.0])
    np.testing.assert_array_equal(amfcc(np.array([[1.0, 2.0], [3.0, 6.0]])).values, [2.0, 4.0])
    with pytest.raises(ValueError):
        amfcc(np.zeros((0, 3)))


@given(arrays(np.float64, (7, 3), elements=st.floats(-1e3, 1e3)), st.randoms())
def test_amfcc_permutation_invariant(x, rnd):
    order = list(range(7))
    rnd.shuffle(order)
    np.testing.assert_allclose(amfcc(x[order]).values, amfcc(x).values, atol=1e-9)


# -- PCA ---------------------------------------------------------------------------

def test_pca_line():
    xs = np.linspace(-3, 3, 11)
    t = pca_fit(labelled(np.column_stack([xs, 2 * xs]), [None] * 11), 2)
    np.testing.assert_allclose(t.components[0], np.array([1.0, 2.0]) / np.sqrt(5), atol=1e-12)
    assert t.explained_variance[1] == pytest.approx(0.0, abs=1e-12)
    assert t.explained_variance[0] >= t.explained_variance[1]


def test_pca_identical_points_zero_variance():
    t = pca_fit(labelled(np.ones((4, 3)), [None] * 4), 3)
    np.testing.assert_array_equal(t.explained_variance, 0.0)


def test_pca_errors():
    vs = labelled(np.eye(3), [None] * 3)
    with pytest.raises(ValueError):
        pca_fit(vs, 4)
    with pytest.raises(ValueError):
        pca_fit(vs[:1], 1)
    with pytest.raises(ValueError):
        pca_project(pca_fit(vs, 2), np.zeros(2))


@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
@settings(max_examples=30)
def test_pca_full_rank_isometry(seed, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(10, d)) * rng.uniform(0.1, 5, d)
    vs = labelled(x, [None] * 10)
    t = pca_fit(vs, d)
    np.testing.assert_allclose(t.components @ t.components.T, np.eye(d), atol=1e-9)
    assert np.all(np.diff(t.explained_variance) <= 1e-12)
    projected = np.array([pca_project(t, v) for v in vs])
    np.testing.assert_allclose(pdist(projected), pdist(x), atol=1e-9)


def test_pca_project_examples():
    rng = np.random.default_rng(1)
    vs = labelled(rng.normal(size=(8, 3)), [None] * 8)
    t = pca_fit(vs, 2)
    np.testing.assert_allclose(pca_project(t, t.mean), 0.0, atol=1e-12)
    np.testing.assert_allclose(pca_project(t, t.mean + t.components[1]), [0.0, 1.0], atol=1e-12)
    a, b = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_allclose(
        pca_project(t, 2 * a - b),
        2 * pca_project(t, a) - pca_project(t, b),
        atol=1e-12,
    )


# -- k-NN --------------------------------------------------------------------------

def test_knn_exact_match():
    train = labelled([[0, 0], [5, 5], [9, 0]], ["a", "b", "c"])
    assert knn_classify(train, [5, 5], 1) == ("b", {"b": 1})


def test_knn_majority_of_three():
    train = labelled([[0, 0], [0.5, 0], [-0.2, 0], [10, 10]], ["x", "y", "x", "y"])
    label, votes = knn_classify(train, [0.1, 0], 3)
    assert label == "x" and votes == {"x": 2, "y": 1}


def test_knn_global_majority_with_tie_rule():
    train = labelled([[0], [1], [2], [3]], ["b", "a", "a", "b"])
    # k = |train|: 2-2 vote tie, summed distance from 1.5 equal (2.0 each) -> label order
    assert knn_classify(train, [1.5], 4)[0] == "a"
    train3 = labelled([[0], [1], [2]], ["b", "a", "b"])
    assert knn_classify(train3, [1.0], 3)[0] == "b"


def test_knn_distance_tie_uses_training_order():
    train = labelled([[1], [-1]], ["right", "left"])
    assert knn_classify(train, [0], 1)[0] == "right"
    assert knn_classify(train[::-1], [0], 1)[0] == "left"


def test_knn_vote_tie_uses_summed_distance():
    train = labelled([[1], [-1.5], [3], [-3.2]], ["p", "q", "p", "q"])
    assert knn_classify(train, [0], 4)[0] == "p"


def test_knn_errors():
    with pytest.raises(ValueError):
        knn_classify([], [0], 1)
    train = labelled([[0]], ["a"])
    with pytest.raises(ValueError):
        knn_classify(train, [0], 2)
    with pytest.raises(ValueError):
        knn_classify(train, [0, 1], 1)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
@settings(max_examples=30)
def test_knn_rigid_invariance(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 3))
    labels = [f"c{i % 3}" for i in range(12)]
    q = rng.normal(size=3)
    rot = special_ortho_group.rvs(3, random_state=seed % (2**31))
    shift = rng.normal(size=3) * 10
    a = knn_classify(labelled(x, labels), q, k)
    b = knn_classify(labelled(x @ rot.T + shift, labels), rot @ q + shift, k)
    assert a[0] == b[0]


def test_standardizer():
    vs = labelled([[0.0, 10.0], [2.0, 10.0], [4.0, 10.0]], ["a", "b", "c"])
    s = Standardizer.fit(vs)
    out = np.array([s(v).values for v in vs])
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out[:, 0].std(), 1.0)
    np.testing.assert_array_equal(out[:, 1], 0.0)
    assert s(vs[0]).label == "a"


def test_csv_round_trip():
    vs = labelled([[0.1, -2.5e-7], [3.0, 1 / 3]], ["owl", "jay"]) + [AmfccVector(np.array([1.0, 2.0]))]
    back = vectors_from_csv(vectors_to_csv(vs))
    assert [v.label for v in back] == ["owl", "jay", None]
    for a, b in zip(vs, back):
        np.testing.assert_array_equal(a.values, b.values)
