"""Limit-order-book event data: loading, normalisation, windowing, synthesis, checkpoints.

Event matrices are feature-major (``[40, n_events]``) like the public FI-2010
files. The 40 rows are ordered per price level: ask price, ask volume, bid
price, bid volume for level 1, then level 2, and so on. Labels keep the FI-2010
codes 1, 2, 3 (up, stationary, down); windowed datasets store 0-based class
indices instead.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigurationError, DataError, ParseError
from .layers import ModelSpec, build_network

HORIZONS = (10, 20, 30, 50, 100)
N_FEATURES = 40
N_LEVELS = 10
LABEL_CODES = (1, 2, 3)
CLASS_NAMES = ("up", "stationary", "down")

# synthetic generator constants
REGIME_LENGTH = 200
REGIME_DRIFT = (0.02, 0.0, -0.02)  # label 1 up, 2 stationary, 3 down
PRICE_NOISE = 0.01
HALF_SPREAD = 0.05
LEVEL_TICK = 0.01
LEVEL_NOISE = 0.002
START_PRICE = 10.0


@dataclass
class EventMatrix:
    features: np.ndarray
    labels: np.ndarray
    boundaries: tuple = (0,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[1] != self.labels.size:
            raise DataError(f"{self.labels.size} labels for feature matrix of shape {self.features.shape}")
        self.boundaries = tuple(int(b) for b in self.boundaries)

    @property
    def n_events(self):
        return self.labels.size

    @property
    def n_days(self):
        return len(self.boundaries)

    def day_slices(self):
        ends = list(self.boundaries[1:]) + [self.n_events]
        return [slice(a, b) for a, b in zip(self.boundaries, ends)]

    def select_days(self, days):
        slices = self.day_slices()
        parts = [slices[d] for d in days]
        starts = np.cumsum([0] + [s.stop - s.start for s in parts[:-1]])
        return EventMatrix(
            np.concatenate([self.features[:, s] for s in parts], axis=1),
            np.concatenate([self.labels[s] for s in parts]),
            tuple(starts),
        )


def concat_days(matrices):
    starts, offset = [], 0
    for m in matrices:
        starts.extend(b + offset for b in m.boundaries)
        offset += m.n_events
    return EventMatrix(
        np.concatenate([m.features for m in matrices], axis=1),
        np.concatenate([m.labels for m in matrices]),
        tuple(starts),
    )


def split_days(m, n_train_days=7):
    """First ``n_train_days`` days for training, the rest for testing."""
    if not 0 < n_train_days < m.n_days:
        raise ConfigurationError(f"cannot split {m.n_days} days into {n_train_days} train days and a test part")
    return m.select_days(range(n_train_days)), m.select_days(range(n_train_days, m.n_days))


# ---------------------------------------------------------------- loading


def _scan_numeric(lines):
    rows = []
    for r, line in enumerate(lines, start=1):
        cells = line.split()
        row = []
        for c, cell in enumerate(cells, start=1):
            try:
                row.append(float(cell))
            except ValueError:
                raise ParseError(f"non-numeric cell {cell!r}", r, c) from None
        rows.append(row)
    return rows


def load_fi2010(path, horizon=10):
    """Read one FI-2010 style file: features then 5 label rows, one column per event."""
    if horizon not in HORIZONS:
        raise ParseError(f"unknown horizon {horizon}; expected one of {HORIZONS}")
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        matrix = np.loadtxt(io.StringIO("\n".join(lines)), ndmin=2)
    except ValueError:
        rows = _scan_numeric(lines)
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            for r, row in enumerate(rows, start=1):
                if len(row) != len(rows[0]):
                    raise ParseError(f"row has {len(row)} cells, expected {len(rows[0])}", r) from None
        matrix = np.array(rows)
    n_rows = matrix.shape[0]
    if n_rows < N_FEATURES + len(HORIZONS):
        raise ParseError(f"expected at least {N_FEATURES + len(HORIZONS)} rows (40 features + 5 labels), found {n_rows}")
    label_row = n_rows - len(HORIZONS) + HORIZONS.index(horizon)
    labels = matrix[label_row]
    for c, v in enumerate(labels, start=1):
        if v not in LABEL_CODES:
            raise ParseError(f"label {v!r} not in {LABEL_CODES}", label_row + 1, c)
    if not np.isfinite(matrix[:N_FEATURES]).all():
        r, c = np.argwhere(~np.isfinite(matrix[:N_FEATURES]))[0]
        raise ParseError("non-finite feature value", r + 1, c + 1)
    return EventMatrix(matrix[:N_FEATURES].copy(), labels.astype(np.int64))


def load_events_csv(path):
    """Read the event-per-row fixture layout with header ``f1,...,f40,label``."""
    lines = Path(path).read_text().splitlines()
    lines = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    expected = [f"f{i}" for i in range(1, N_FEATURES + 1)] + ["label"]
    if not lines or [h.strip() for h in lines[0].split(",")] != expected:
        raise ParseError("header must be f1,...,f40,label", 1)
    rows = []
    for r, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != N_FEATURES + 1:
            raise ParseError(f"expected {N_FEATURES + 1} cells, found {len(cells)}", r)
        try:
            rows.append([float(x) for x in cells])
        except ValueError:
            bad = next(i for i, x in enumerate(cells) if not _is_float(x))
            raise ParseError(f"non-numeric cell {cells[bad]!r}", r, bad + 1) from None
    arr = np.array(rows).reshape(-1, N_FEATURES + 1)
    labels = arr[:, -1]
    if not np.isin(labels, LABEL_CODES).all():
        raise ParseError(f"labels must be in {LABEL_CODES}")
    return EventMatrix(arr[:, :-1].T.copy(), labels.astype(np.int64))


def _is_float(x):
    try:
        float(x)
        return True
    except ValueError:
        return False


def write_events_csv(m, path):
    header = ",".join([f"f{i}" for i in range(1, N_FEATURES + 1)] + ["label"])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t in range(m.n_events):
            fh.write(",".join(repr(float(v)) for v in m.features[:, t]) + f",{int(m.labels[t])}\n")


def load_days(paths, horizon=10):
    """Load one file per trading day (FI-2010 text or fixture CSV) and concatenate."""
    days = [load_events_csv(p) if str(p).endswith(".csv") else load_fi2010(p, horizon) for p in paths]
    if not days:
        raise DataError("no input files")
    return concat_days(days)


# ---------------------------------------------------------------- normalisation and windows


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def zscore_normalize(train, *others):
    """Z-score every matrix with per-feature statistics of ``train`` only.

    Returns ``([train, *others], stats)``; zero-variance features keep std 1.
    """
    mean = train.features.mean(axis=1)
    std = train.features.std(axis=1)
    flat = std == 0
    if flat.any():
        warnings.warn(f"zero-variance features {np.flatnonzero(flat).tolist()}; using std 1", stacklevel=2)
        std = np.where(flat, 1.0, std)
    stats = NormStats(mean, std)
    out = [EventMatrix((m.features - mean[:, None]) / std[:, None], m.labels, m.boundaries) for m in (train, *others)]
    return out, stats


@dataclass
class WindowedDataset:
    """Samples ``X[N, D, window]`` with 0-based class indices ``y``."""

    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    stats: NormStats | None = None
    end_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return WindowedDataset(self.X[idx], self.y[idx], self.split, self.stats, self.end_index[idx])


def window_series(m, window=10, stride=1, split="train", stats=None):
    """Slide a ``window``-event window over every day; windows never cross days.

    A window is labelled with the label of its last event.
    """
    if window < 1 or stride < 1:
        raise ConfigurationError("window and stride must be >= 1")
    xs, ys, ends = [], [], []
    for day, sl in enumerate(m.day_slices()):
        length = sl.stop - sl.start
        if length < window:
            warnings.warn(f"day {day} has {length} events, fewer than the window of {window}; skipped", stacklevel=2)
            continue
        seg = m.features[:, sl]
        view = np.lib.stride_tricks.sliding_window_view(seg, window, axis=1)[:, ::stride]  # [D, n, window]
        xs.append(np.transpose(view, (1, 0, 2)))
        last = np.arange(window - 1, length, stride)
        ys.append(m.labels[sl][last] - 1)
        ends.append(sl.start + last)
    if not xs:
        return WindowedDataset(np.zeros((0, m.features.shape[0], window)), np.zeros(0, dtype=np.int64), split, stats)
    return WindowedDataset(
        np.ascontiguousarray(np.concatenate(xs)),
        np.concatenate(ys).astype(np.int64),
        split,
        stats,
        np.concatenate(ends).astype(np.int64),
    )


def prepare_splits(m, n_train_days=7, window=10):
    """Day split, train-only z-scoring and windowing in one call."""
    train, test = split_days(m, n_train_days)
    (train, test), stats = zscore_normalize(train, test)
    return window_series(train, window, split="train", stats=stats), window_series(test, window, split="test", stats=stats)


# ---------------------------------------------------------------- synthetic data


def regime_sequence(n_events, seed):
    """Per-event regime index (0 up, 1 stationary, 2 down).

    Regimes switch every 200 events; each run of three blocks visits the three
    regimes in a seeded random order, which keeps classes balanced.
    """
    rng = np.random.default_rng([seed, 0])
    n_blocks = -(-n_events // REGIME_LENGTH)
    blocks = np.concatenate([rng.permutation(3) for _ in range(-(-n_blocks // 3))])[:n_blocks]
    return np.repeat(blocks, REGIME_LENGTH)[:n_events]


def synth_generate(n_events, seed, horizon=10, n_days=10, window=10):
    """LOB-like events driven by a latent mid-price with regime-dependent drift."""
    if n_events < window or n_events < n_days * window:
        raise ConfigurationError(f"n_events={n_events} too small for {n_days} days of windows of {window}")
    regimes = regime_sequence(n_events, seed)
    rng = np.random.default_rng([seed, 1])
    drift = np.asarray(REGIME_DRIFT)[regimes]
    steps = drift[:-1] + PRICE_NOISE * rng.standard_normal(n_events - 1)
    price = START_PRICE + np.concatenate([[0.0], np.cumsum(steps)])
    level = np.arange(1, N_LEVELS + 1)[:, None]
    ask = price + HALF_SPREAD + LEVEL_TICK * level + LEVEL_NOISE * rng.standard_normal((N_LEVELS, n_events))
    bid = price - HALF_SPREAD - LEVEL_TICK * level + LEVEL_NOISE * rng.standard_normal((N_LEVELS, n_events))
    ask_vol = np.exp(rng.standard_normal((N_LEVELS, n_events)))
    bid_vol = np.exp(rng.standard_normal((N_LEVELS, n_events)))
    features = np.empty((N_FEATURES, n_events))
    features[0::4], features[1::4], features[2::4], features[3::4] = ask, ask_vol, bid, bid_vol
    future = np.minimum(np.arange(n_events) + horizon, n_events - 1)
    labels = regimes[future] + 1
    day_len = n_events // n_days
    return EventMatrix(features, labels, tuple(range(0, day_len * n_days, day_len)))


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"TSVZ"
CKPT_VERSION = 1


def save_checkpoint(net, path, meta=None):
    """Write ``net`` (spec block + every named tensor) with a trailing SHA-256."""
    block = json.dumps(
        {"model": json.loads(net.spec.to_text()), "trained": net.trained, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(block)))
    buf.write(block)
    params = net.parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())
    return path


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("unexpected end of checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Return ``(spec_block_dict, {name: array})`` after validating the file."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    if len(data) < 4 + 32 or hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or truncated)")
    r = _Reader(data[:-32])
    r.take(4)
    version, block_len = r.unpack("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    block = json.loads(r.take(block_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    return block, tensors


def load_checkpoint(path):
    block, tensors = read_checkpoint(path)
    try:
        spec = ModelSpec.from_text(json.dumps(block["model"]))
        net = build_network(spec, seed=0)
    except ConfigurationError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    expected = set(net.parameters())
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise CheckpointError(f"{path}: tensor table does not match the model spec (missing {missing}, unexpected {extra})")
    net.load_state_dict(tensors)
    net.trained = bool(block.get("trained", False))
    net.meta = block.get("meta", {})
    return net


def file_checksum(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
