"""Run configuration and the experiment stages shared by the CLI and the tests.

Stages communicate only through files in the output directory; every function
here reads its inputs from disk, writes its artifacts and returns their paths.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import viz
from .data import file_checksum, load_checkpoint, load_days, prepare_splits, save_checkpoint, synth_generate, write_events_csv
from .errors import ConfigurationError, DataError, ParseError
from .layers import PRESETS, build_network
from .metrics import (
    EVAL_TEST_SAMPLES,
    EVAL_TRAIN_SAMPLES,
    EvalReport,
    classification_report,
    embedding_report,
    linear_probe,
    pca_fit,
    pca_project,
    subsample,
)
from .train import TrainConfig, predict, train_classifier
from .tsne import EmbedConfig, embed, load_affinities, precompute_affinities, representations, save_affinities, train_embedder

FILES = {
    "synth": "synth",
    "classifier": "classifier.ckpt",
    "affinities": "affinities.tsaf",
    "affinities_input": "affinities_input.tsaf",
    "frozen": "embedder_frozen.ckpt",
    "finetune": "embedder_finetune.ckpt",
    "unsupervised": "embedder_unsupervised.ckpt",
}


@dataclass
class RunConfig:
    """Fully resolved settings of one run; ``out`` is excluded from the hash."""

    # data
    data_dir: str = ""
    synth_events: int = 30_000
    synth_days: int = 10
    horizon: int = 10
    train_days: int = 7
    window: int = 10
    # model
    preset: str = "tabl"
    width_divisor: int = 1
    # classifier training
    epochs: int = 200
    batch_size: int = 1024
    lr: float = 0.001
    lr_decay_factor: float = 0.5
    lr_patience: int = 4
    min_lr: float = 0.0001
    early_stop_min_delta: float = 0.0001
    early_stop_patience: int = 6
    dropout_rate: float = 0.1
    # embedder
    perplexity: float = 100.0
    head_layers: str = "500,500,2000,2"
    embed_epochs: int = 200
    embed_batch_size: int = 2048
    embed_lr: float = 0.001
    recompute_affinities: bool = False
    # the probe is one dense layer, so it gets its own (cheap) full budget
    probe_epochs: int = 200
    # evaluation and plots
    trust_k: int = 12
    knn_k: int = 3
    eval_train_samples: int = EVAL_TRAIN_SAMPLES
    eval_test_samples: int = EVAL_TEST_SAMPLES
    plot_samples: int = viz.PLOT_SAMPLES
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        self.head_widths()
        self.train_config()
        self.embed_config("frozen")

    def head_widths(self):
        try:
            return tuple(int(x) for x in str(self.head_layers).split(",") if x.strip())
        except ValueError:
            raise ConfigurationError(f"head_layers must be comma-separated integers, got {self.head_layers!r}") from None

    def train_config(self, epochs=None):
        return TrainConfig(
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay_factor=self.lr_decay_factor,
            lr_patience=self.lr_patience,
            min_lr=self.min_lr,
            early_stop_min_delta=self.early_stop_min_delta,
            early_stop_patience=self.early_stop_patience,
            dropout_rate=self.dropout_rate,
            seed=self.seed,
        )

    def embed_config(self, stage):
        return EmbedConfig(
            perplexity=self.perplexity,
            head_layers=self.head_widths(),
            epochs=self.embed_epochs,
            batch_size=self.embed_batch_size,
            stage=stage,
            seed=self.seed,
            lr=self.embed_lr,
            lr_decay_factor=self.lr_decay_factor,
            lr_patience=self.lr_patience,
            min_lr=self.min_lr,
            early_stop_min_delta=self.early_stop_min_delta,
            early_stop_patience=self.early_stop_patience,
            recompute_affinities=self.recompute_affinities,
        )

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def path(self, key):
        return Path(self.out) / FILES.get(key, key)


def _coerce(name, kind, text):
    text = str(text).strip()
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigurationError(f"config key {name!r}: cannot parse {text!r} as {kind.__name__}") from None
    return text


def parse_config_text(text):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for r, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", r)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(path=None, overrides=None):
    """Defaults, then the config file, then ``overrides`` (later wins); unknown keys are rejected."""
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc.strerror}") from None
        try:
            raw.update(parse_config_text(text))
        except ParseError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    types = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(raw) - set(types))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    values = {k: _coerce(k, kinds[types[k]], v) for k, v in raw.items()}
    return RunConfig(**values)


def write_config(cfg, path):
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------- manifests


def write_manifest(cfg, command, inputs=(), outputs=()):
    """``key = value`` record of a command: config hash, seed and file checksums."""
    out = Path(cfg.out)
    lines = [f"command = {command}", f"config_hash = {cfg.config_hash()}", f"seed = {cfg.seed}"]
    for p in inputs:
        lines.append(f"input.{Path(p).name} = {file_checksum(p)}")
    for p in outputs:
        lines.append(f"output.{Path(p).name} = {file_checksum(p)}")
    path = out / f"manifest_{command}.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _require(path):
    if not Path(path).exists():
        raise DataError(f"required input file not found: {path}")
    return Path(path)


# ---------------------------------------------------------------- stages


def gen_synth(cfg):
    out = cfg.path("synth")
    out.mkdir(parents=True, exist_ok=True)
    m = synth_generate(cfg.synth_events, cfg.seed, cfg.horizon, cfg.synth_days, cfg.window)
    paths = []
    for day in range(m.n_days):
        path = out / f"day_{day:02d}.csv"
        write_events_csv(m.select_days([day]), path)
        paths.append(path)
    return paths


def data_files(cfg):
    root = Path(cfg.data_dir) if cfg.data_dir else cfg.path("synth")
    if not root.is_dir():
        raise DataError(f"data directory not found: {root}")
    paths = sorted(p for p in root.iterdir() if p.is_file() and not p.name.startswith("."))
    if not paths:
        raise DataError(f"no data files in {root}")
    return paths


def load_splits(cfg):
    """``(train, test, paths)`` windowed datasets from the configured day files."""
    paths = data_files(cfg)
    m = load_days(paths, cfg.horizon)
    train, test = prepare_splits(m, cfg.train_days, cfg.window)
    if len(train) == 0 or len(test) == 0:
        raise DataError("no windows in the train or test split")
    return train, test, paths


def new_classifier(cfg):
    mlp_window = {"window": cfg.window} if cfg.preset == "mlp" else {}
    return build_network(cfg.preset, cfg.seed, width_divisor=cfg.width_divisor, dropout_rate=cfg.dropout_rate, **mlp_window)


def _meta(cfg, **extra):
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, **extra}


def classifier_report(net, data, cfg, name="classifier"):
    rep = classification_report(predict(net, data.X), data.y, net.n_classes)
    return EvalReport(
        name=name,
        accuracy=rep["accuracy"],
        precision=rep["precision"],
        recall=rep["recall"],
        f1=rep["f1"],
        n_train=0,
        n_test=len(data),
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
    )


def train_classifier_stage(cfg, log=None):
    train, test, paths = load_splits(cfg)
    net = new_classifier(cfg)
    net, history = train_classifier(net, train, cfg.train_config(), log)
    ckpt = save_checkpoint(net, cfg.path("classifier"), _meta(cfg, stage="classifier", epochs_run=len(history)))
    report = classifier_report(net, test, cfg)
    rpath = viz.write_report(report, Path(cfg.out) / "report_classifier.txt")
    return {"inputs": paths, "outputs": [ckpt, rpath], "report": report, "history": history}


def precompute_stage(cfg, space="features"):
    train, _, paths = load_splits(cfg)
    ecfg = cfg.embed_config("frozen")
    if space == "features":
        ckpt = _require(cfg.path("classifier"))
        net = load_checkpoint(ckpt)
        inputs = [*paths, ckpt]
        target = cfg.path("affinities")
    else:
        net = new_classifier(cfg)
        inputs = list(paths)
        target = cfg.path("affinities_input")
    batches = precompute_affinities(net, train, ecfg, space)
    if not batches:
        raise DataError("training split too small for a single affinity batch")
    save_affinities(batches, target, ecfg.batch_size, ecfg.perplexity)
    return {"inputs": inputs, "outputs": [target]}


def embedder_stage(cfg, stage, init="classifier", log=None):
    """Train the embedding head.

    ``init='classifier'`` starts from the trained classifier (frozen stage) or
    from the frozen-stage embedder (finetune stage). ``init='random'`` trains a
    randomly initialised feature map and head end to end on input-space
    affinities, the unsupervised baseline.
    """
    train, _, paths = load_splits(cfg)
    if init == "random":
        aff_path = _require(cfg.path("affinities_input"))
        net = new_classifier(cfg)
        inputs = [*paths, aff_path]
        stage, space, target = "finetune", "input", cfg.path("unsupervised")
    elif init == "classifier":
        aff_path = _require(cfg.path("affinities"))
        source = cfg.path("classifier") if stage == "frozen" else cfg.path("frozen")
        net = load_checkpoint(_require(source))
        inputs = [*paths, source, aff_path]
        space, target = "features", cfg.path(stage)
    else:
        raise ConfigurationError(f"init must be 'classifier' or 'random', got {init!r}")
    batches, header = load_affinities(aff_path)
    ecfg = cfg.embed_config(stage)
    if header["perplexity"] != ecfg.perplexity or header["batch_size"] != ecfg.batch_size:
        raise ConfigurationError(f"{aff_path} was computed with other perplexity/batch settings; rerun precompute-affinities")
    net, history = train_embedder(net, train, batches, ecfg, log, affinity_space=space)
    net.trained = True
    save_checkpoint(net, target, _meta(cfg, stage=stage, init=init, epochs_run=len(history)))
    return {"inputs": inputs, "outputs": [target], "history": history}


def embedder_path(cfg, which):
    if which in FILES:
        return cfg.path(which)
    return Path(which)


def _eval_indices(cfg, train, test):
    return subsample(len(train), cfg.eval_train_samples, cfg.seed), subsample(len(test), cfg.eval_test_samples, cfg.seed + 1)


def embed_stage(cfg, which="finetune", split="test"):
    train, test, paths = load_splits(cfg)
    ckpt = _require(embedder_path(cfg, which))
    net = load_checkpoint(ckpt)
    data = test if split == "test" else train
    points = embed(net, data.X)
    target = Path(cfg.out) / f"embedding_{Path(ckpt).stem}_{split}.csv"
    viz.write_embedding_csv(points, data.y, target, cfg.config_hash())
    return {"inputs": [*paths, ckpt], "outputs": [target], "points": points}


def evaluate_stage(cfg, which="finetune"):
    """Trustworthiness (against the classifier's ``z``) and k-NN score of an embedder."""
    ckpt = _require(embedder_path(cfg, which))
    ref_path = _require(cfg.path("classifier"))
    train, test, paths = load_splits(cfg)
    net = load_checkpoint(ckpt)
    ref = load_checkpoint(ref_path)
    itr, ite = _eval_indices(cfg, train, test)
    z_ref = representations(ref, test.X[ite])
    report = embedding_report(
        Path(ckpt).stem,
        z_ref,
        embed(net, train.X[itr]),
        train.y[itr],
        embed(net, test.X[ite]),
        test.y[ite],
        trust_k=cfg.trust_k,
        knn_k=cfg.knn_k,
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
    )
    rpath = viz.write_report(report, Path(cfg.out) / f"report_{Path(ckpt).stem}.txt")
    return {"inputs": [*paths, ckpt, ref_path], "outputs": [rpath], "report": report}


def probe_stage(cfg, which="finetune", log=None):
    ckpt = _require(embedder_path(cfg, which))
    train, test, paths = load_splits(cfg)
    net = load_checkpoint(ckpt)
    report, _ = linear_probe(net, train, test, cfg.train_config(cfg.probe_epochs), log)
    report.name = f"probe_{Path(ckpt).stem}"
    report.config_hash = cfg.config_hash()
    rpath = viz.write_report(report, Path(cfg.out) / f"report_{report.name}.txt")
    return {"inputs": [*paths, ckpt], "outputs": [rpath], "report": report}


def pca_stage(cfg):
    """Project the classifier's ``z`` onto its top two principal axes and evaluate."""
    ckpt = _require(cfg.path("classifier"))
    train, test, paths = load_splits(cfg)
    net = load_checkpoint(ckpt)
    model = pca_fit(representations(net, train.X))
    itr, ite = _eval_indices(cfg, train, test)
    z_test = representations(net, test.X[ite])
    report = embedding_report(
        "pca",
        z_test,
        pca_project(model, representations(net, train.X[itr])),
        train.y[itr],
        pca_project(model, z_test),
        test.y[ite],
        trust_k=cfg.trust_k,
        knn_k=cfg.knn_k,
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
    )
    rpath = viz.write_report(report, Path(cfg.out) / "report_pca.txt")
    epath = viz.write_embedding_csv(pca_project(model, representations(net, test.X)), test.y, Path(cfg.out) / "embedding_pca_test.csv", cfg.config_hash())
    return {"inputs": [*paths, ckpt], "outputs": [rpath, epath], "report": report}


def plot_stage(cfg, embedding_csv, title=""):
    src = _require(embedding_csv)
    points, labels = viz.read_embedding_csv(src)
    if len(points) == 0:
        raise DataError(f"{src} contains no points")
    plot = viz.make_scatter(points, labels, cfg.plot_samples, cfg.seed, title=title or Path(src).stem)
    target = Path(cfg.out) / f"plot_{Path(src).stem}.svg"
    viz.render_scatter_svg(plot, target, cfg.config_hash())
    return {"inputs": [src], "outputs": [target], "n_points": len(plot.points)}


__all__ = [
    "RunConfig",
    "resolve_config",
    "parse_config_text",
    "write_config",
    "write_manifest",
    "gen_synth",
    "load_splits",
    "new_classifier",
    "train_classifier_stage",
    "precompute_stage",
    "embedder_stage",
    "embed_stage",
    "evaluate_stage",
    "probe_stage",
    "pca_stage",
    "plot_stage",
]
