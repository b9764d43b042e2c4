import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsviz.data import prepare_splits, synth_generate
from tsviz.errors import ConfigurationError, DataError, DimensionError, StateError
from tsviz.layers import build_network
from tsviz.metrics import (
    EvalReport,
    classification_report,
    confusion_matrix,
    knn_predict,
    knn_score,
    linear_probe,
    pca_fit,
    pca_project,
    subsample,
    trustworthiness,
)
from tsviz.train import TrainConfig, predict, train_classifier


# ---------------------------------------------------------------- brute-force oracles


def sqdist(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b))


def neighbours(points, i):
    """Other points ordered by (distance, index)."""
    return [j for _, j in sorted((sqdist(points[i], points[j]), j) for j in range(len(points)) if j != i)]


def brute_trustworthiness(Z, Y, k):
    n = len(Z)
    total = 0
    for i in range(n):
        high = neighbours(Z, i)
        rank = {j: r + 1 for r, j in enumerate(high)}
        for j in neighbours(Y, i)[:k]:
            if rank[j] > k:
                total += rank[j] - k
    return 1.0 - 2.0 / (n * k * (2 * n - 3 * k - 1)) * total


def brute_knn(train, labels, test, k):
    preds = []
    for q in test:
        order = sorted((sqdist(q, p), j) for j, p in enumerate(train))[:k]
        votes, spent = {}, {}
        for d, j in order:
            c = int(labels[j])
            votes[c] = votes.get(c, 0) + 1
            spent[c] = spent.get(c, 0.0) + math.sqrt(d)
        best = max(votes.values())
        preds.append(min((spent[c], c) for c in votes if votes[c] == best)[1])
    return np.array(preds)


# ---------------------------------------------------------------- trustworthiness


def test_isometric_embedding_scores_one():
    rng = np.random.default_rng(0)
    Z = np.zeros((40, 5))
    Z[:, :2] = rng.normal(size=(40, 2))
    assert trustworthiness(Z, Z[:, :2], k=5) == 1.0


def test_rotation_invariance():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(40, 6))
    Y = rng.normal(size=(40, 2))
    a = np.pi / 5
    R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    assert trustworthiness(Z, Y, 5) == pytest.approx(trustworthiness(Z, Y @ R.T, 5), abs=1e-12)


def test_thirty_point_case_matches_oracle():
    rng = np.random.default_rng(2)
    Z, Y = rng.normal(size=(30, 4)), rng.normal(size=(30, 2))
    assert trustworthiness(Z, Y, 5) == brute_trustworthiness(Z.tolist(), Y.tolist(), 5)


@settings(max_examples=60, deadline=None)
@given(st.integers(6, 50), st.integers(0, 2**31 - 1), st.booleans())
def test_trustworthiness_matches_oracle(n, seed, integer_grid):
    rng = np.random.default_rng(seed)
    if integer_grid:  # exact distance ties exercise the index tie rule
        Z = rng.integers(0, 3, (n, 3)).astype(float)
        Y = rng.integers(0, 3, (n, 2)).astype(float)
    else:
        Z, Y = rng.normal(size=(n, 5)), rng.normal(size=(n, 2))
    k = int(rng.integers(1, (n - 1) // 2 + 1))
    assert trustworthiness(Z, Y, k) == brute_trustworthiness(Z.tolist(), Y.tolist(), k)


@pytest.mark.parametrize("k", [0, 10, 11])
def test_trustworthiness_k_range(k):
    Z = np.random.default_rng(3).normal(size=(20, 3))
    with pytest.raises(ConfigurationError):
        trustworthiness(Z, Z[:, :2], k)


def test_trustworthiness_size_mismatch():
    with pytest.raises(DimensionError):
        trustworthiness(np.zeros((10, 3)), np.zeros((9, 2)), 2)


def test_trustworthiness_in_unit_interval():
    rng = np.random.default_rng(4)
    t = trustworthiness(rng.normal(size=(60, 8)), rng.normal(size=(60, 2)), 12)
    assert 0.0 <= t <= 1.0


# ---------------------------------------------------------------- k-NN


def test_coincident_same_class_points_win():
    train = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    labels = np.array([2, 2, 2, 0, 1])
    assert knn_predict(train, labels, np.array([[0.0, 0.0]]), 3)[0] == 2


def test_k1_is_nearest_neighbour():
    rng = np.random.default_rng(5)
    train, test = rng.normal(size=(25, 2)), rng.normal(size=(10, 2))
    labels = rng.integers(0, 3, 25)
    nearest = np.argmin(((test[:, None] - train[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(knn_predict(train, labels, test, 1), labels[nearest])


def test_vote_tie_goes_to_smaller_total_distance():
    train = np.array([[1.0, 0.0], [0.0, 3.0], [5.0, 5.0]])
    labels = np.array([1, 0, 2])
    # k=2: one vote each for classes 1 and 0; class 1 is closer
    assert knn_predict(train, labels, np.array([[0.0, 0.0]]), 2)[0] == 1


def test_twenty_point_case_matches_oracle():
    rng = np.random.default_rng(6)
    train, test = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
    labels = rng.integers(0, 3, 20)
    np.testing.assert_array_equal(knn_predict(train, labels, test, 3), brute_knn(train.tolist(), labels, test.tolist(), 3))


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 50), st.integers(1, 20), st.integers(0, 2**31 - 1), st.booleans())
def test_knn_matches_oracle(n_train, n_test, seed, integer_grid):
    rng = np.random.default_rng(seed)
    if integer_grid:
        train = rng.integers(0, 3, (n_train, 2)).astype(float)
        test = rng.integers(0, 3, (n_test, 2)).astype(float)
    else:
        train, test = rng.normal(size=(n_train, 2)), rng.normal(size=(n_test, 2))
    labels = rng.integers(0, 3, n_train)
    test_labels = rng.integers(0, 3, n_test)
    expected = brute_knn(train.tolist(), labels, test.tolist(), 3)
    np.testing.assert_array_equal(knn_predict(train, labels, test, 3), expected)
    assert knn_score(train, labels, test, test_labels, 3) == np.mean(expected == test_labels)


def test_knn_empty_train():
    with pytest.raises(DataError):
        knn_score(np.zeros((0, 2)), np.zeros(0), np.zeros((1, 2)), np.zeros(1))


# ---------------------------------------------------------------- classification report


def test_perfect_predictions():
    y = np.array([0, 1, 2, 2, 1])
    rep = classification_report(y, y, 3)
    assert (rep["accuracy"], rep["precision"], rep["recall"], rep["f1"]) == (1.0, 1.0, 1.0, 1.0)


def test_hand_counted_confusion():
    labels = np.array([0, 0, 0, 1, 1, 1])
    preds = np.array([0, 0, 1, 1, 1, 1])
    np.testing.assert_array_equal(confusion_matrix(preds, labels, 2), [[2, 1], [0, 3]])
    rep = classification_report(preds, labels, 2)
    assert rep["accuracy"] == pytest.approx(5 / 6)
    np.testing.assert_allclose(rep["per_class_precision"], [1.0, 0.75])
    np.testing.assert_allclose(rep["per_class_recall"], [2 / 3, 1.0])


def test_macro_f1_invariant_to_relabeling():
    rng = np.random.default_rng(7)
    labels, preds = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
    perm = np.array([2, 0, 1])
    a = classification_report(preds, labels, 3)["f1"]
    b = classification_report(perm[preds], perm[labels], 3)["f1"]
    assert a == pytest.approx(b, abs=1e-15)


def test_absent_class_warns():
    with pytest.warns(UserWarning, match="class 2 absent"):
        rep = classification_report(np.array([0, 1]), np.array([0, 1]), 3)
    assert rep["per_class_recall"][2] == 0.0


def test_report_reads_its_inputs():
    labels = np.array([0, 1, 2, 0, 1, 2])
    assert classification_report(labels[::-1], labels, 3)["accuracy"] < 1.0


def test_eval_report_round_trip_and_range():
    rep = EvalReport(name="x", accuracy=0.5, trustworthiness=0.9, knn_score=0.7, n_train=3, n_test=4, seed=1, config_hash="ab")
    assert EvalReport.from_record(rep.to_record()) == rep
    with pytest.raises(ValueError):
        EvalReport(accuracy=1.5)


def test_subsample_is_seeded_without_replacement():
    a = subsample(1000, 100, 3)
    assert len(set(a)) == 100
    np.testing.assert_array_equal(a, subsample(1000, 100, 3))
    np.testing.assert_array_equal(subsample(50, 100, 3), np.arange(50))


# ---------------------------------------------------------------- PCA


def test_pca_line():
    t = np.linspace(-1, 1, 21)
    model = pca_fit(np.stack([t, t], axis=1))
    np.testing.assert_allclose(np.abs(model.axes[:, 0]), [1 / np.sqrt(2)] * 2, atol=1e-12)
    assert model.explained_ratio[0] == pytest.approx(1.0)


def test_pca_mean_projects_to_origin():
    Z = np.random.default_rng(8).normal(size=(50, 4))
    model = pca_fit(Z)
    np.testing.assert_allclose(pca_project(model, Z.mean(axis=0, keepdims=True)), 0.0, atol=1e-12)


def test_pca_known_covariance():
    # variances 1, 9, 0.25, 4, 0.5 along the coordinate axes: top axes are e2 then e4
    rng = np.random.default_rng(9)
    raw = rng.normal(size=(20_000, 5))
    raw = (raw - raw.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(raw, rowvar=False))).T  # whiten exactly
    Z = raw * np.sqrt([1.0, 9.0, 0.25, 4.0, 0.5])
    model = pca_fit(Z)
    expected = np.zeros((5, 2))
    expected[1, 0] = expected[3, 1] = 1.0
    np.testing.assert_allclose(model.axes, expected, atol=1e-6)
    np.testing.assert_allclose(model.explained_ratio, [9.0 / 14.75, 4.0 / 14.75], atol=1e-9)


def test_pca_axes_orthonormal_and_projection_decorrelated():
    Z = np.random.default_rng(10).normal(size=(300, 6)) @ np.random.default_rng(11).normal(size=(6, 6))
    model = pca_fit(Z)
    np.testing.assert_allclose(model.axes.T @ model.axes, np.eye(2), atol=1e-9)
    cov = np.cov(pca_project(model, Z), rowvar=False)
    assert abs(cov[0, 1]) < 1e-8
    assert model.explained_ratio[0] >= model.explained_ratio[1]


def test_pca_needs_two_dimensions():
    with pytest.raises(DimensionError):
        pca_fit(np.zeros((10, 1)))


# ---------------------------------------------------------------- linear probe


@pytest.fixture(scope="module")
def small_trained():
    train, test = prepare_splits(synth_generate(12000, seed=0), 7, 10)
    net = build_network("tabl", seed=0, width_divisor=4)
    train_classifier(net, train, TrainConfig(epochs=20, batch_size=256, seed=0))
    # the probe gets the full default budget; it is a single dense layer
    return net, train, test, TrainConfig(epochs=200, batch_size=256, seed=0)


def test_probe_reproduces_classifier(small_trained):
    net, train, test, cfg = small_trained
    before = net.state_dict()
    report, probe = linear_probe(net, train, test, cfg)
    own = float(np.mean(predict(net, test.X) == test.y))
    assert abs(report.accuracy - own) <= 0.01
    assert sum(p.size for p in probe.params.values()) == 60 // 4 * 3 + 3
    assert all(np.array_equal(before[k], v) for k, v in net.state_dict().items())


def test_probe_layer_size_full_width():
    net = build_network("tabl", seed=0)
    assert net.d * 3 + 3 == 183


def test_probe_needs_trained_features(small_trained):
    _, train, test, cfg = small_trained
    with pytest.raises(StateError):
        linear_probe(build_network("tabl", seed=0, width_divisor=4), train, test, cfg)
