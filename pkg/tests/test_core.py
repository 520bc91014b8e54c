import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labeldist.core import (AnnotationMatrix, DatasetSplit, ValidationError, argmax_label,
                            empirical_dist, is_distribution, kl_divergence, read_annotations,
                            read_distributions, read_features, read_splits, write_annotations,
                            write_distributions, write_features, write_splits)
from labeldist.genmodel import Hyperparams, gen_graph, random_assignment

from oracles import kl_sum


def matrix_from(triples, M=None, N=None, P=None):
    """Build from 1-based (item, annotator, label) triples."""
    arr = np.array(triples) - 1
    return AnnotationMatrix(M or arr[:, 0].max() + 1, N or arr[:, 1].max() + 1,
                            P or arr[:, 2].max() + 1, arr[:, 0], arr[:, 1], arr[:, 2])


def test_empirical_dist_counts():
    m = matrix_from([(1, 1, 1), (1, 2, 1), (1, 3, 2)], P=2)
    np.testing.assert_allclose(empirical_dist(m, 0), [2 / 3, 1 / 3])


def test_empirical_dist_single_annotator():
    m = matrix_from([(1, 1, 3)], P=3)
    np.testing.assert_array_equal(empirical_dist(m, 0), [0, 0, 1])


def test_empirical_dist_matches_hand_count():
    _, m = gen_graph(Hyperparams(2, 2), 30, 12, 4, random_assignment(30, 12, 5, seed=3), seed=3)
    for item in range(m.num_items):
        hist = np.zeros(4)
        for i, a, y in zip(m.items, m.annotators, m.labels):
            if i == item:
                hist[y] += 1
        np.testing.assert_allclose(empirical_dist(m, item), hist / hist.sum())


def test_matrix_rejects_item_without_labels():
    with pytest.raises(ValidationError, match="without any label"):
        AnnotationMatrix(3, 2, 2, [0, 1], [0, 0], [0, 1])


def test_matrix_rejects_duplicate_pair():
    with pytest.raises(ValidationError, match="duplicate"):
        AnnotationMatrix(1, 2, 2, [0, 0], [1, 1], [0, 1])


def test_matrix_rejects_label_out_of_range():
    with pytest.raises(ValidationError, match="label outside"):
        AnnotationMatrix(1, 1, 2, [0], [0], [2])


def test_empirical_dist_out_of_range_item():
    m = matrix_from([(1, 1, 1)])
    with pytest.raises(ValidationError):
        empirical_dist(m, 4)


def test_assignment_sets_consistent():
    m = matrix_from([(1, 1, 1), (1, 2, 2), (2, 1, 2)])
    assert m.assignment_set() == {(0, 0), (0, 1), (1, 0)}
    assert m.label_slice(1) == {(0, 1), (1, 0)}
    assert m.label_slice(0) | m.label_slice(1) == m.assignment_set()


def test_argmax_examples():
    assert argmax_label([0.2, 0.5, 0.3]) == 1
    assert argmax_label([0.5, 0.5]) == 0
    m = matrix_from([(1, 1, 1), (1, 2, 1), (1, 3, 2)])
    assert argmax_label(empirical_dist(m, 0)) == 0


def test_kl_identity_and_closed_form():
    p = np.array([0.1, 0.2, 0.7])
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-9)
    assert kl_divergence([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-8)


def test_kl_matches_high_precision_sum():
    assert kl_divergence([0.3, 0.7], [0.6, 0.4]) == pytest.approx(
        kl_sum([0.3, 0.7], [0.6, 0.4]), rel=1e-8)


def test_kl_smoothing_keeps_one_hot_finite():
    v = kl_divergence([0.5, 0.5], [1.0, 0.0])
    assert np.isfinite(v) and v > 5


def test_kl_length_mismatch():
    with pytest.raises(ValidationError, match="length"):
        kl_divergence([0.5, 0.5], [1 / 3] * 3)


simplex = st.integers(2, 6).flatmap(
    lambda P: st.lists(st.floats(0.0, 1.0), min_size=P, max_size=P).filter(lambda v: sum(v) > 1e-3))


@settings(max_examples=200, deadline=None)
@given(simplex, st.integers(0, 2 ** 31))
def test_kl_zero_iff_equal(raw, seed):
    p = np.array(raw) / sum(raw)
    assert kl_divergence(p, p) < 1e-9
    q = np.random.default_rng(seed).dirichlet(np.ones(p.size))
    if np.abs(p - q).max() > 1e-3:
        assert kl_divergence(p, q) > 1e-9
    assert kl_divergence(p, q) >= 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=12), st.randoms())
def test_empirical_dist_simplex_and_argmax_permutation(labels, rnd):
    n = len(labels)
    triples = [(1, i + 1, y) for i, y in enumerate(labels)]
    m1 = matrix_from(triples, P=4)
    shuffled = triples[:]
    rnd.shuffle(shuffled)
    m2 = matrix_from(shuffled, P=4)
    d = empirical_dist(m1, 0)
    assert is_distribution(d)
    assert argmax_label(d) == argmax_label(empirical_dist(m2, 0))
    assert d.sum() == pytest.approx(1.0, abs=1e-9) and n >= 1


def test_split_validation():
    with pytest.raises(ValidationError, match="overlap"):
        DatasetSplit([0, 1], [1], [2])
    with pytest.raises(ValidationError, match="cover"):
        DatasetSplit([0], [1], [2], features=np.zeros((4, 2)))
    s = DatasetSplit.random(10, seed=1, features=np.zeros((10, 3)))
    assert sorted(np.concatenate([s.train, s.dev, s.test]).tolist()) == list(range(10))
    assert s.num_features == 3


def test_io_roundtrips(tmp_path):
    _, m = gen_graph(Hyperparams(2, 2), 20, 6, 3, random_assignment(20, 6, 3, seed=1), seed=1)
    write_annotations(m, tmp_path / "a.csv")
    m2 = read_annotations(tmp_path / "a.csv")
    for name in ("items", "annotators", "labels"):
        np.testing.assert_array_equal(getattr(m, name), getattr(m2, name))
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "item,annotator,label"

    X = np.random.default_rng(0).normal(size=(20, 3))
    write_features(X, tmp_path / "f.csv")
    np.testing.assert_array_equal(read_features(tmp_path / "f.csv"), X)

    s = DatasetSplit.random(20, seed=2)
    write_splits(s, tmp_path / "s.json")
    s2 = read_splits(tmp_path / "s.json")
    np.testing.assert_array_equal(s.test, s2.test)

    D = m.empirical_dists()
    write_distributions(tmp_path / "d.csv", np.arange(20), D)
    ids, D2 = read_distributions(tmp_path / "d.csv")
    np.testing.assert_array_equal(D, D2)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "item,p1,p2,p3,argmax"


def test_read_annotations_rejects_zero_ids(tmp_path):
    (tmp_path / "a.csv").write_text("item,annotator,label\n1,1,0\n")
    with pytest.raises(ValidationError, match="1-based"):
        read_annotations(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("item,rater,label\n1,1,1\n")
    with pytest.raises(ValidationError, match="header"):
        read_annotations(tmp_path / "b.csv")
