"""Parametric t-SNE on top of a classifier's representation layer.

High-dimensional affinities are computed once per fixed batch (Gaussian kernel,
per-point bandwidth calibrated to a target perplexity, then symmetrised). The
embedding head is trained to match them with Student-t similarities of its 2-D
outputs under the KL divergence, first with the classifier frozen, then jointly
with the feature map.
"""

from __future__ import annotations

import hashlib
import io
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigurationError, DataError, StateError
from .layers import attach_embedder
from .train import epoch_batches, fit

logger = logging.getLogger(__name__)

BETA_MIN = 1e-20
BETA_MAX = 1e20
PERPLEXITY_TOL = 1e-4
MAX_BISECTIONS = 50
STAGES = ("frozen", "finetune")


@dataclass
class EmbedConfig:
    perplexity: float = 100.0
    head_layers: tuple = (500, 500, 2000, 2)
    epochs: int = 200
    batch_size: int = 2048
    stage: str = "frozen"
    seed: int = 0
    lr: float = 0.001
    lr_decay_factor: float = 0.5
    lr_patience: int = 4
    min_lr: float = 0.0001
    early_stop_min_delta: float = 0.0001
    early_stop_patience: int = 6
    recompute_affinities: bool = False

    def __post_init__(self):
        self.head_layers = tuple(int(n) for n in self.head_layers)
        if not self.head_layers or self.head_layers[-1] != 2:
            raise ConfigurationError(f"embedding head must end in 2 units, got {self.head_layers}")
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.perplexity < 2:
            raise ConfigurationError("perplexity must be >= 2")
        if not self.perplexity < self.batch_size / 3:
            raise ConfigurationError(f"perplexity {self.perplexity} must be below batch_size/3 = {self.batch_size / 3:g}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")


@dataclass
class AffinityBatch:
    indices: np.ndarray
    P: np.ndarray
    row_perplexity: np.ndarray = field(default_factory=lambda: np.zeros(0))


# ---------------------------------------------------------------- affinities


def _row(d, beta):
    """Conditional row and its perplexity (2 ** entropy in bits) for shifted distances."""
    p = np.exp(-beta * d)
    p /= p.sum()
    nz = p[p > 0]
    entropy = -(nz * np.log2(nz)).sum()
    return p, 2.0**entropy


def calibrate_bandwidth(dists, target_perplexity, self_index=None, tol=PERPLEXITY_TOL, max_iter=MAX_BISECTIONS):
    """Find the Gaussian precision ``beta`` whose conditional row has the target perplexity.

    ``dists`` are squared distances from one point to every point of its batch;
    ``self_index`` marks the point itself (it gets probability 0). The search
    doubles or halves ``beta`` from 1 until the target is bracketed inside
    ``(1e-20, 1e20)``, then bisects for at most ``max_iter`` steps or until the
    perplexity is within ``tol``. Returns ``(beta, row, achieved_perplexity)``.
    """
    dists = np.asarray(dists, dtype=np.float64)
    if target_perplexity < 2:
        raise ConfigurationError("target perplexity must be >= 2")
    if not np.isfinite(dists).all():
        raise DataError("non-finite distance in perplexity calibration")
    others = np.ones(dists.size, dtype=bool)
    if self_index is not None:
        others[self_index] = False
    if others.sum() < 1:
        raise DataError("perplexity calibration needs at least 2 points")
    d = dists[others]
    d = d - d.min()

    beta = 1.0
    p, perp = _row(d, beta)
    if abs(perp - target_perplexity) > tol:
        lo, hi = BETA_MIN, BETA_MAX
        # bracket: too flat (perplexity too high) means beta too small
        if perp > target_perplexity:
            lo = beta
            while beta < BETA_MAX:
                beta = min(beta * 2.0, BETA_MAX)
                p, perp = _row(d, beta)
                if perp <= target_perplexity:
                    hi = beta
                    break
                lo = beta
        else:
            hi = beta
            while beta > BETA_MIN:
                beta = max(beta / 2.0, BETA_MIN)
                p, perp = _row(d, beta)
                if perp >= target_perplexity:
                    lo = beta
                    break
                hi = beta
        for _ in range(max_iter):
            if abs(perp - target_perplexity) <= tol or lo >= hi:
                break
            beta = 0.5 * (lo + hi)
            p, perp = _row(d, beta)
            if perp > target_perplexity:
                lo = beta
            else:
                hi = beta
    row = np.zeros(dists.size)
    row[others] = p
    return beta, row, perp


def squared_distances(Z):
    Z = np.asarray(Z, dtype=np.float64)
    sq = (Z * Z).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (Z @ Z.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def batch_affinities(Z, perplexity, indices=None):
    """Symmetrised affinities ``p_ij = (p_{j|i} + p_{i|j}) / 2B`` for one batch."""
    Z = Z.data if isinstance(Z, Tensor) else np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if n <= perplexity:
        raise ConfigurationError(f"batch of {n} points cannot reach perplexity {perplexity}")
    D = squared_distances(Z)
    cond = np.empty((n, n))
    achieved = np.empty(n)
    for i in range(n):
        _, cond[i], achieved[i] = calibrate_bandwidth(D[i], perplexity, self_index=i)
    P = (cond + cond.T) / (2.0 * n)
    idx = np.arange(n) if indices is None else np.asarray(indices, dtype=np.int64)
    return AffinityBatch(idx, P, achieved)


# ---------------------------------------------------------------- low-dimensional side


def student_t_similarities(Y):
    """``q_ij`` from a one-degree-of-freedom Student-t kernel on 2-D points."""
    Y = ad.as_tensor(Y)
    n = Y.shape[0]
    if n < 2:
        raise ConfigurationError("need at least 2 points")
    sq = ad.sum(Y * Y, axis=1)
    D = ad.reshape(sq, (n, 1)) + ad.reshape(sq, (1, n)) - 2.0 * ad.matmul(Y, ad.transpose(Y))
    kernel = (1.0 / (D + 1.0)) * Tensor(1.0 - np.eye(n))
    return kernel / ad.sum(kernel)


def kl_loss(P, Q):
    """``sum_{i != j} p_ij log(p_ij / q_ij)`` with ``0 log 0 = 0``; differentiable in Q."""
    P = P.data if isinstance(P, Tensor) else np.asarray(P, dtype=np.float64)
    Q = ad.as_tensor(Q)
    if P.shape != Q.shape:
        raise ConfigurationError(f"P {P.shape} and Q {Q.shape} differ in shape")
    P = P * (1.0 - np.eye(P.shape[0]))
    log_p = np.log(np.where(P > 0, P, 1.0))
    return ad.sum(Tensor(P) * (Tensor(log_p) - ad.log(Q)))


def check_affinity_batch(batch, target_perplexity, perplexity_tol=1e-3, mass_tol=1e-9):
    """Return a list of violated AffinityBatch invariants (empty when valid)."""
    P = batch.P
    problems = []
    if not np.array_equal(P, P.T):
        problems.append("P not symmetric")
    if np.any(np.diag(P) != 0):
        problems.append("non-zero diagonal")
    if np.any(P < 0):
        problems.append("negative entry")
    if abs(P.sum() - 1.0) > mass_tol:
        problems.append(f"total mass {P.sum()!r}")
    if batch.row_perplexity.size and np.max(np.abs(batch.row_perplexity - target_perplexity)) > perplexity_tol:
        problems.append("row perplexity off target")
    return problems


# ---------------------------------------------------------------- training


def representations(net, X, space="features", chunk=4096):
    """Inference-mode ``z`` for every sample, or the flattened input for ``space='input'``."""
    X = np.asarray(X)
    if space == "input":
        return X.reshape(len(X), -1).astype(np.float64)
    if space != "features":
        raise ConfigurationError(f"unknown affinity space {space!r}")
    out = []
    with ad.no_grad():
        for i in range(0, len(X), chunk):
            x, _ = net._prepare(X[i : i + chunk])
            out.append(net.forward_F(x).data)
    return np.concatenate(out) if out else np.zeros((0, net.d))


def batch_partition(n, batch_size, seed):
    """Fixed seeded partition of ``range(n)`` into batches (kept for every epoch)."""
    return epoch_batches(n, batch_size, seed, 0)


def precompute_affinities(net, data, cfg, space="features"):
    """One :class:`AffinityBatch` per batch of a fixed partition of ``data``.

    The trailing batch is dropped (with a warning) when it has too few points to
    reach the target perplexity.
    """
    Z = representations(net, data.X, space)
    batches = []
    for idx in batch_partition(len(Z), cfg.batch_size, cfg.seed):
        if len(idx) < cfg.perplexity + 1:
            warnings.warn(f"dropping trailing batch of {len(idx)} samples (< perplexity + 1)", stacklevel=2)
            continue
        batches.append(batch_affinities(Z[idx], cfg.perplexity, idx))
    return batches


def train_embedder(net, data, affinities, cfg, log=None, affinity_space="features"):
    """Train the Q head (``stage='frozen'``) or Q and F jointly (``'finetune'``).

    Attaches a head from ``cfg.head_layers`` when the network has none. C is
    never updated. Returns ``(net, history)``.
    """
    if not net.embedder:
        attach_embedder(net, cfg.head_layers, cfg.seed)
    if not affinities:
        raise DataError("no affinity batches to train on")
    parts = "Q" if cfg.stage == "frozen" else "FQ"
    params = net.parameters(parts)
    every = net.parameters()
    saved = {k: p.requires_grad for k, p in every.items()}
    for k, p in every.items():
        p.requires_grad = k in params

    batches = list(affinities)
    cached_z = {}
    if cfg.stage == "frozen":
        for b in batches:
            cached_z[id(b)] = Tensor(representations(net, data.X[b.indices]))

    def batches_fn(epoch):
        nonlocal batches
        if cfg.recompute_affinities and epoch > 1 and cfg.stage == "finetune":
            Z = representations(net, data.X, affinity_space)
            batches = [batch_affinities(Z[b.indices], cfg.perplexity, b.indices) for b in batches]
        order = np.random.default_rng([cfg.seed, epoch, 2]).permutation(len(batches))
        return [(batches[i].indices, batches[i]) for i in order]

    def loss_fn(item, rng):
        _, b = item
        z = cached_z.get(id(b))
        if z is None:
            x, _ = net._prepare(data.X[b.indices])
            z = net.forward_F(x, "train", rng)
        return kl_loss(b.P, student_t_similarities(net.forward_Q(z)))

    try:
        history = fit(
            params,
            loss_fn,
            batches_fn,
            cfg,
            constraints=[net.apply_constraints] if cfg.stage == "finetune" else [],
            log=log,
            stage=f"embedder-{cfg.stage}",
        )
    finally:
        for k, p in every.items():
            p.requires_grad = saved[k]
    return net, history


def mean_kl(net, data, affinities):
    """Mean per-batch KL of the current embedding against fixed affinities."""
    values = []
    with ad.no_grad():
        for b in affinities:
            y = embed(net, data.X[b.indices])
            values.append(kl_loss(b.P, student_t_similarities(Tensor(y))).item())
    return float(np.mean(values))


def embed(net, X, chunk=4096):
    """2-D points ``Q(F(X))`` for a batch ``X`` (or one sample)."""
    if not net.embedder:
        raise StateError("network has no embedding head")
    X = np.asarray(X, dtype=np.float64)
    single = X.shape == tuple(net.spec.input_shape)
    if single:
        X = X[None]
    out = []
    with ad.no_grad():
        for i in range(0, len(X), chunk):
            x, _ = net._prepare(X[i : i + chunk])
            out.append(net.forward_Q(net.forward_F(x)).data)
    y = np.concatenate(out) if out else np.zeros((0, 2))
    return y[0] if single else y


# ---------------------------------------------------------------- cache file

AFF_MAGIC = b"TSAF"
AFF_VERSION = 1


def save_affinities(batches, path, batch_size, perplexity):
    buf = io.BytesIO()
    buf.write(AFF_MAGIC)
    buf.write(struct.pack("<IQdQ", AFF_VERSION, int(batch_size), float(perplexity), len(batches)))
    for b in batches:
        n = len(b.indices)
        buf.write(struct.pack("<Q", n))
        buf.write(np.asarray(b.indices, dtype="<i8").tobytes())
        buf.write(np.ascontiguousarray(b.P, dtype="<f8").tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())
    return path


def load_affinities(path):
    """Return ``(batches, {'batch_size', 'perplexity'})`` from a cache file."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"affinity cache not found: {path}") from None
    if data[:4] != AFF_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an affinity cache")
    if len(data) < 36 or hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or truncated)")
    body = memoryview(data[:-32])
    head = struct.calcsize("<IQdQ")
    version, batch_size, perplexity, count = struct.unpack_from("<IQdQ", body, 4)
    if version != AFF_VERSION:
        raise CheckpointError(f"{path}: unsupported affinity cache version {version}")
    pos = 4 + head
    batches = []
    for _ in range(count):
        (n,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        idx = np.frombuffer(body, dtype="<i8", count=n, offset=pos).astype(np.int64)
        pos += 8 * n
        P = np.frombuffer(body, dtype="<f8", count=n * n, offset=pos).astype(np.float64).reshape(n, n)
        pos += 8 * n * n
        batches.append(AffinityBatch(idx, P))
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after {count} batches")
    return batches, {"batch_size": batch_size, "perplexity": perplexity}
