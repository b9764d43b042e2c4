"""Command-line front end: ``tsviz <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error,
3 numerical failure or internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import ConfigurationError, DataError, TsvizError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

logger = logging.getLogger("tsviz")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 by default, which is our data-error code
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _key_value(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[], metavar="KEY=VALUE", help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tsviz", description="Time-series classifier visualisation with parametric t-SNE.", parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    add("gen-synth", "write synthetic LOB days as CSV files")
    add("train-classifier", "train the configured preset classifier")
    p = add("precompute-affinities", "compute the fixed-batch t-SNE affinities")
    p.add_argument("--space", choices=("features", "input"), default="features", help="classifier representations or raw input windows")
    p = add("train-embedder", "train the parametric t-SNE head")
    p.add_argument("--stage", choices=("frozen", "finetune"), default="frozen")
    p.add_argument("--init", choices=("classifier", "random"), default="classifier", help="'random' trains the unsupervised baseline end to end")
    p = add("embed", "write the 2-D embedding of a split as CSV")
    p.add_argument("--checkpoint", default="finetune", help="frozen, finetune, unsupervised or a checkpoint path")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p = add("evaluate", "trustworthiness and k-NN score of an embedder")
    p.add_argument("--checkpoint", default="finetune")
    p = add("probe", "linear-probe accuracy of an embedder's feature map")
    p.add_argument("--checkpoint", default="finetune")
    add("pca-baseline", "PCA projection of the classifier representations")
    p = add("plot", "render an embedding CSV as an SVG scatter plot")
    p.add_argument("--input", required=True, help="embedding CSV (x,y,label)")
    p.add_argument("--title", default="")
    return parser


def _resolve(args):
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    return pipeline.resolve_config(args.config, overrides)


def _training_log(cfg, tag):
    path = Path(cfg.out) / f"log_{tag}.jsonl"
    path.write_text("")

    def log(line):
        with open(path, "a") as fh:
            fh.write(line.rstrip("\n") + "\n")

    return log


def manifest_tag(args):
    """Manifest name; variants of one command (stage, checkpoint, split) get their own file."""
    cmd = args.command
    if cmd == "train-embedder":
        return f"{cmd}_{args.stage if args.init == 'classifier' else 'unsupervised'}"
    if cmd == "precompute-affinities":
        return f"{cmd}_{args.space}"
    if cmd == "embed":
        return f"{cmd}_{Path(args.checkpoint).stem}_{args.split}"
    if cmd in ("evaluate", "probe"):
        return f"{cmd}_{Path(args.checkpoint).stem}"
    if cmd == "plot":
        return f"{cmd}_{Path(args.input).stem}"
    return cmd


def run(args):
    cfg = _resolve(args)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    cmd, tag = args.command, manifest_tag(args)
    if cmd == "gen-synth":
        result = {"inputs": [], "outputs": pipeline.gen_synth(cfg)}
    elif cmd == "train-classifier":
        result = pipeline.train_classifier_stage(cfg, _training_log(cfg, tag))
    elif cmd == "precompute-affinities":
        result = pipeline.precompute_stage(cfg, args.space)
    elif cmd == "train-embedder":
        result = pipeline.embedder_stage(cfg, args.stage, args.init, _training_log(cfg, tag))
    elif cmd == "embed":
        result = pipeline.embed_stage(cfg, args.checkpoint, args.split)
    elif cmd == "evaluate":
        result = pipeline.evaluate_stage(cfg, args.checkpoint)
    elif cmd == "probe":
        result = pipeline.probe_stage(cfg, args.checkpoint, _training_log(cfg, tag))
    elif cmd == "pca-baseline":
        result = pipeline.pca_stage(cfg)
    elif cmd == "plot":
        result = pipeline.plot_stage(cfg, args.input, args.title)
    else:  # pragma: no cover - argparse restricts the choices
        raise UsageError(f"unknown command {cmd!r}")
    manifest = pipeline.write_manifest(cfg, tag, result["inputs"], result["outputs"])
    for path in result["outputs"]:
        print(path)
    if "report" in result:
        print(pipeline.viz.format_report(result["report"]), end="")
    logger.info("wrote %s", manifest)
    return result


def exit_code(exc):
    """Map an exception to the documented exit code."""
    if isinstance(exc, (UsageError, ConfigurationError)):
        return EXIT_USAGE
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    return EXIT_NUMERICAL


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args)
    except Exception as exc:  # every failure path maps to exactly one code
        code = exit_code(exc)
        label = {EXIT_USAGE: "usage error", EXIT_DATA: "data error", EXIT_NUMERICAL: "numerical error"}[code]
        if code == EXIT_NUMERICAL and not isinstance(exc, TsvizError):
            label = "internal error"
        print(f"tsviz: {label}: {exc}", file=sys.stderr)
        if args.verbose:
            logger.exception("traceback")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
