"""Embedding quality metrics, classification report, PCA baseline and the linear probe."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DataError, DimensionError, StateError
from .layers import Dense, LayerSpec
from .train import class_weights, epoch_batches, fit, one_hot, weighted_cross_entropy

DEFAULT_TRUST_K = 12
DEFAULT_KNN_K = 3
EVAL_TRAIN_SAMPLES = 10_000
EVAL_TEST_SAMPLES = 5_000
_CHUNK = 512


@dataclass
class EvalReport:
    """Flat record of one evaluation; metrics that were not computed are ``None``."""

    name: str = ""
    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    trustworthiness: float | None = None
    knn_score: float | None = None
    n_train: int = 0
    n_test: int = 0
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        for key in ("accuracy", "precision", "recall", "f1", "trustworthiness", "knn_score"):
            v = getattr(self, key)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{key}={v} outside [0, 1]")

    def to_dict(self):
        return asdict(self)

    def to_record(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_record(cls, line):
        d = json.loads(line)
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def subsample(n, size, seed):
    """Sorted seeded subsample of ``range(n)`` without replacement."""
    if size is None or n <= size:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size, replace=False))


# ---------------------------------------------------------------- neighbourhood metrics


def _neighbour_order(A, rows):
    """Stable neighbour order of each point in ``rows``; the point itself comes first."""
    d = cdist(A[rows], A, "sqeuclidean")
    d[np.arange(len(rows)), rows] = -1.0
    return np.argsort(d, axis=1, kind="stable")


def trustworthiness(Z_high, Y_low, k=DEFAULT_TRUST_K):
    """Penalise low-dimensional k-neighbours that are not high-dimensional k-neighbours.

    Ranks are taken over squared Euclidean distances; equal distances are ranked
    by sample index.
    """
    Z = np.asarray(Z_high, dtype=np.float64)
    Y = np.asarray(Y_low, dtype=np.float64)
    n = len(Z)
    if len(Y) != n:
        raise DimensionError(f"{n} high-dimensional points but {len(Y)} low-dimensional points")
    if not 1 <= k < n / 2:
        raise ConfigurationError(f"trustworthiness needs 1 <= k < N/2, got k={k}, N={n}")
    penalty = 0
    for start in range(0, n, _CHUNK):
        rows = np.arange(start, min(start + _CHUNK, n))
        order_high = _neighbour_order(Z, rows)
        rank = np.empty_like(order_high)
        np.put_along_axis(rank, order_high, np.arange(n)[None, :], axis=1)
        low_nn = _neighbour_order(Y, rows)[:, 1 : k + 1]
        r = np.take_along_axis(rank, low_nn, axis=1)
        penalty += int(np.where(r > k, r - k, 0).sum())
    return 1.0 - 2.0 / (n * k * (2 * n - 3 * k - 1)) * penalty


def knn_predict(train_Y, train_labels, test_Y, k=DEFAULT_KNN_K):
    """Majority vote of the k nearest training points.

    Vote ties go to the class with the smallest summed distance, then to the
    lowest class index. Neighbour ties are ranked by training index.
    """
    train_Y = np.asarray(train_Y, dtype=np.float64)
    test_Y = np.asarray(test_Y, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=int)
    if len(train_Y) == 0:
        raise DataError("k-NN needs a non-empty training set")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    k = min(k, len(train_Y))
    n_classes = int(train_labels.max()) + 1
    preds = np.empty(len(test_Y), dtype=int)
    for start in range(0, len(test_Y), _CHUNK):
        d = cdist(test_Y[start : start + _CHUNK], train_Y, "sqeuclidean")
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        dist = np.sqrt(np.take_along_axis(d, nn, axis=1))
        lab = train_labels[nn]
        for row in range(len(nn)):
            votes = np.bincount(lab[row], minlength=n_classes)
            spent = np.bincount(lab[row], weights=dist[row], minlength=n_classes)
            best = votes.max()
            cands = np.flatnonzero(votes == best)
            preds[start + row] = cands[np.argmin(spent[cands])]
    return preds


def knn_score(train_Y, train_labels, test_Y, test_labels, k=DEFAULT_KNN_K):
    preds = knn_predict(train_Y, train_labels, test_Y, k)
    return float(np.mean(preds == np.asarray(test_labels, dtype=int))) if len(preds) else 0.0


# ---------------------------------------------------------------- classification


def confusion_matrix(preds, labels, n_classes):
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, dtype=int), np.asarray(preds, dtype=int)), 1)
    return m


def classification_report(preds, labels, n_classes):
    """Accuracy plus macro-averaged precision, recall and F1 (0-based classes)."""
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape or preds.size == 0:
        raise DataError("predictions and labels must be non-empty and of equal length")
    cm = confusion_matrix(preds, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    for c in np.flatnonzero(support == 0):
        warnings.warn(f"class {c} absent from labels; its recall is set to 0", stacklevel=2)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    return {
        "accuracy": float(tp.sum() / preds.size),
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
        "per_class_precision": precision,
        "per_class_recall": recall,
        "per_class_f1": f1,
        "confusion": cm,
    }


# ---------------------------------------------------------------- PCA


@dataclass
class PcaModel:
    mean: np.ndarray
    axes: np.ndarray  # [d, 2], orthonormal columns
    explained_ratio: np.ndarray


def pca_fit(Z, n_components=2):
    """Top principal axes from the symmetric eigendecomposition of the covariance."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] < n_components:
        raise DimensionError(f"PCA to {n_components} dimensions needs d >= {n_components}, got shape {Z.shape}")
    if len(Z) <= 2:
        raise DataError("PCA needs more than 2 samples")
    mean = Z.mean(axis=0)
    cov = np.cov(Z - mean, rowvar=False)
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1][:n_components]
    axes = vectors[:, order]
    # sign convention: largest-magnitude coordinate of every axis is positive
    flip = np.sign(axes[np.abs(axes).argmax(axis=0), np.arange(n_components)])
    axes = axes * np.where(flip == 0, 1.0, flip)
    total = values.clip(min=0).sum()
    ratio = values[order].clip(min=0) / total if total > 0 else np.zeros(n_components)
    return PcaModel(mean, axes, ratio)


def pca_project(model, Z):
    return (np.asarray(Z, dtype=np.float64) - model.mean) @ model.axes


# ---------------------------------------------------------------- evaluation helpers


def embedding_report(name, Z_ref_test, Y_train, y_train, Y_test, y_test, trust_k=DEFAULT_TRUST_K, knn_k=DEFAULT_KNN_K, **extra):
    """Trustworthiness (vs ``Z_ref_test``) and k-NN score of a 2-D embedding."""
    return EvalReport(
        name=name,
        trustworthiness=trustworthiness(Z_ref_test, Y_test, trust_k),
        knn_score=knn_score(Y_train, y_train, Y_test, y_test, knn_k),
        n_train=len(Y_train),
        n_test=len(Y_test),
        **extra,
    )


def linear_probe(net, train, test, cfg, log=None):
    """Train a fresh dense softmax layer on frozen ``F`` features; report on ``test``.

    Returns ``(report, probe_layer)``. ``cfg`` is a :class:`~tsviz.train.TrainConfig`.
    """
    from .tsne import representations

    if not net.trained:
        raise StateError("linear probe needs a trained feature map")
    z_train = representations(net, train.X)
    z_test = representations(net, test.X)
    probe = Dense(LayerSpec("dense", units=net.n_classes, activation="softmax"), (net.d,))
    probe.init(np.random.default_rng([cfg.seed, 3]))
    weights = class_weights(train.y, net.n_classes)
    targets = one_hot(train.y, net.n_classes)
    for p in probe.params.values():
        p.requires_grad = True

    def loss_fn(idx, rng):
        return weighted_cross_entropy(probe.forward(Tensor(z_train[idx])), targets[idx], weights)

    fit(
        probe.params,
        loss_fn,
        lambda epoch: epoch_batches(len(z_train), cfg.batch_size, cfg.seed, epoch),
        cfg,
        log=log,
        stage="probe",
    )
    for p in probe.params.values():
        p.requires_grad = False
    with ad.no_grad():
        preds = probe.forward(Tensor(z_test)).data.argmax(axis=1)
    rep = classification_report(preds, test.y, net.n_classes)
    report = EvalReport(
        name="probe",
        accuracy=rep["accuracy"],
        precision=rep["precision"],
        recall=rep["recall"],
        f1=rep["f1"],
        n_train=len(train),
        n_test=len(test),
        seed=cfg.seed,
    )
    return report, probe
