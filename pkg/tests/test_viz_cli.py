import xml.etree.ElementTree as ET

import numpy as np
import pytest

from tsviz import pipeline, viz
from tsviz.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, manifest_tag, build_parser
from tsviz.errors import ConfigurationError, ContractError, ParseError
from tsviz.metrics import EvalReport, classification_report

SVG = "{http://www.w3.org/2000/svg}"

# desk-scale settings for an end-to-end run in a few seconds
SMALL = [
    "synth_events=3000",
    "width_divisor=4",
    "epochs=3",
    "batch_size=256",
    "perplexity=20",
    "head_layers=16,16,32,2",
    "embed_epochs=2",
    "embed_batch_size=256",
    "eval_train_samples=600",
    "eval_test_samples=300",
    "probe_epochs=5",
]


def svg_parts(path):
    root = ET.parse(path).getroot()
    circles = root.findall(f"{SVG}g[@class='points']/{SVG}circle")
    legend = root.findall(f"{SVG}g[@class='legend']/{SVG}g[@class='legend-entry']")
    return root, circles, legend


def cli(out, *argv):
    extra = [x for kv in SMALL for x in ("--set", kv)]
    return main([*argv, "--out", str(out), *extra])


# ---------------------------------------------------------------- SVG


def test_three_points_three_classes(tmp_path):
    plot = viz.ScatterPlot([[0, 0], [1, 1], [2, 0]], [0, 1, 2])
    viz.render_scatter_svg(plot, tmp_path / "p.svg")
    _, circles, legend = svg_parts(tmp_path / "p.svg")
    assert len(circles) == 3
    assert len(legend) == 3
    assert {c.get("r") for c in circles} == {"2"}
    assert [e.find(f"{SVG}text").text for e in legend] == ["up", "stationary", "down"]


def test_one_class_one_legend_entry(tmp_path):
    plot = viz.ScatterPlot(np.random.default_rng(0).normal(size=(20, 2)), np.full(20, 2))
    viz.render_scatter_svg(plot, tmp_path / "p.svg")
    _, circles, legend = svg_parts(tmp_path / "p.svg")
    assert len(legend) == 1
    assert {c.get("fill") for c in circles} == {viz.DEFAULT_COLORS["down"]}


def test_subsample_to_7500(tmp_path):
    rng = np.random.default_rng(1)
    pts, labels = rng.normal(size=(10_000, 2)), rng.integers(0, 3, 10_000)
    a = viz.make_scatter(pts, labels, seed=4)
    b = viz.make_scatter(pts, labels, seed=4)
    assert len(a.points) == 7500
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, viz.make_scatter(pts, labels, seed=5).points)
    viz.render_scatter_svg(a, tmp_path / "p.svg")
    assert len(svg_parts(tmp_path / "p.svg")[1]) == 7500


def test_points_inside_fitted_canvas(tmp_path):
    pts = np.random.default_rng(2).uniform(-50, 80, (100, 2))
    viz.render_scatter_svg(viz.ScatterPlot(pts, np.zeros(100, dtype=int)), tmp_path / "p.svg")
    root, circles, _ = svg_parts(tmp_path / "p.svg")
    xy = np.array([[float(c.get("cx")), float(c.get("cy"))] for c in circles])
    # a 5% margin of the data span on each side: the extremes sit at 0.05/1.1 of the canvas
    lo = viz.MARGIN / (1 + 2 * viz.MARGIN) * viz.CANVAS
    np.testing.assert_allclose(xy.min(axis=0), lo, atol=1e-3)
    np.testing.assert_allclose(xy.max(axis=0), viz.CANVAS - lo, atol=1e-3)
    assert root.get("viewBox").startswith("0 0 ")


def test_empty_plot_is_contract_error(tmp_path):
    with pytest.raises(ContractError):
        viz.render_scatter_svg(viz.ScatterPlot(np.zeros((0, 2)), []), tmp_path / "p.svg")


def test_svg_carries_config_hash(tmp_path):
    viz.render_scatter_svg(viz.ScatterPlot([[0, 0]], [1], title="t"), tmp_path / "p.svg", config_hash="abc123")
    root = ET.parse(tmp_path / "p.svg").getroot()
    assert root.find(f"{SVG}metadata").text == "config_hash=abc123"


def test_embedding_csv_round_trip(tmp_path):
    pts = np.random.default_rng(3).normal(size=(50, 2))
    labels = np.random.default_rng(4).integers(0, 3, 50)
    viz.write_embedding_csv(pts, labels, tmp_path / "e.csv", config_hash="h")
    back_pts, back_labels = viz.read_embedding_csv(tmp_path / "e.csv")
    assert back_pts.tobytes() == pts.tobytes()
    np.testing.assert_array_equal(back_labels, labels)


def test_embedding_csv_bad_row(tmp_path):
    (tmp_path / "e.csv").write_text("x,y,label\n1.0,2.0,0\n1.0,zz,1\n")
    with pytest.raises(ParseError, match="row 3"):
        viz.read_embedding_csv(tmp_path / "e.csv")


# ---------------------------------------------------------------- reports


def sample_report():
    return EvalReport(
        name="finetune", accuracy=0.875, precision=0.8, recall=0.81, f1=0.805,
        trustworthiness=0.9712345678901234, knn_score=0.9, n_train=100, n_test=50, seed=3, config_hash="deadbeef",
    )


def test_report_round_trip(tmp_path):
    rep = sample_report()
    viz.write_report(rep, tmp_path / "r.txt")
    assert viz.read_report(tmp_path / "r.txt") == rep


def test_report_field_order_is_stable(tmp_path):
    viz.write_report(sample_report(), tmp_path / "a.txt")
    viz.write_report(EvalReport.from_record(sample_report().to_record()), tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    keys = list(viz.read_key_values(tmp_path / "a.txt"))
    assert keys[:3] == ["name", "accuracy", "precision"]
    assert {"trustworthiness", "knn_score", "f1"} <= set(keys)


def test_perfect_classifier_report(tmp_path):
    y = np.array([0, 1, 2, 1, 0, 2])
    rep = classification_report(y, y, 3)
    report = EvalReport(name="perfect", accuracy=rep["accuracy"], precision=rep["precision"], recall=rep["recall"], f1=rep["f1"])
    back = viz.read_report(viz.write_report(report, tmp_path / "r.txt"))
    assert (back.accuracy, back.precision, back.recall, back.f1) == (1.0, 1.0, 1.0, 1.0)


def test_report_missing_record(tmp_path):
    (tmp_path / "r.txt").write_text("name = x\n")
    with pytest.raises(ParseError):
        viz.read_report(tmp_path / "r.txt")


# ---------------------------------------------------------------- config


def test_config_file_then_overrides(tmp_path):
    (tmp_path / "run.cfg").write_text("# comment\npreset = cnn\nepochs = 5  # trailing\nlr = 0.01\n")
    cfg = pipeline.resolve_config(tmp_path / "run.cfg", {"epochs": "7"})
    assert (cfg.preset, cfg.epochs, cfg.lr) == ("cnn", 7, 0.01)


def test_unknown_config_key(tmp_path):
    (tmp_path / "run.cfg").write_text("learning_rate = 0.1\n")
    with pytest.raises(ConfigurationError, match="learning_rate"):
        pipeline.resolve_config(tmp_path / "run.cfg")


def test_bad_config_value():
    with pytest.raises(ConfigurationError, match="epochs"):
        pipeline.resolve_config(None, {"epochs": "many"})


def test_config_hash_ignores_out_only():
    a = pipeline.resolve_config(None, {"out": "x"})
    assert a.config_hash() == pipeline.resolve_config(None, {"out": "y"}).config_hash()
    assert a.config_hash() != pipeline.resolve_config(None, {"seed": "1"}).config_hash()
    assert len(a.config_hash()) == 16


def test_written_config_reloads(tmp_path):
    cfg = pipeline.resolve_config(None, {"preset": "lstm", "perplexity": "30", "recompute_affinities": "true"})
    pipeline.write_config(cfg, tmp_path / "c.cfg")
    assert pipeline.resolve_config(tmp_path / "c.cfg") == cfg


def test_manifest_tags():
    parser = build_parser()
    assert manifest_tag(parser.parse_args(["train-embedder", "--stage", "finetune"])) == "train-embedder_finetune"
    assert manifest_tag(parser.parse_args(["train-embedder", "--stage", "finetune", "--init", "random"])) == "train-embedder_unsupervised"
    assert manifest_tag(parser.parse_args(["embed", "--checkpoint", "frozen"])) == "embed_frozen_test"


# ---------------------------------------------------------------- CLI exit codes


def test_unknown_subcommand(capsys):
    assert main(["dance"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_no_subcommand(capsys):
    assert main([]) == EXIT_USAGE


def test_unknown_set_key(tmp_path, capsys):
    assert main(["gen-synth", "--out", str(tmp_path), "--set", "colour=red"]) == EXIT_USAGE
    assert "colour" in capsys.readouterr().err


def test_evaluate_without_checkpoint(tmp_path, capsys):
    assert main(["evaluate", "--out", str(tmp_path)]) == EXIT_DATA
    assert "embedder_finetune.ckpt" in capsys.readouterr().err


def test_plot_missing_input(tmp_path, capsys):
    assert main(["plot", "--out", str(tmp_path), "--input", str(tmp_path / "nope.csv")]) == EXIT_DATA
    assert "nope.csv" in capsys.readouterr().err


def test_gen_synth_deterministic(tmp_path):
    for run in ("a", "b"):
        assert main(["gen-synth", "--seed", "7", "--out", str(tmp_path / run), "--set", "synth_events=2000"]) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 11  # ten days plus the manifest
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# ---------------------------------------------------------------- end to end


PIPELINE = [
    ["gen-synth"],
    ["train-classifier"],
    ["precompute-affinities"],
    ["train-embedder", "--stage", "frozen"],
    ["train-embedder", "--stage", "finetune"],
    ["embed", "--checkpoint", "finetune"],
    ["evaluate", "--checkpoint", "frozen"],
    ["evaluate", "--checkpoint", "finetune"],
    ["probe", "--checkpoint", "finetune"],
    ["pca-baseline"],
]


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    codes = [cli(out, *argv) for argv in PIPELINE]
    codes.append(cli(out, "plot", "--input", str(out / "embedding_embedder_finetune_test.csv"), "--title", "finetuned"))
    return out, codes


def test_full_pipeline_exits_zero(pipeline_run):
    _, codes = pipeline_run
    assert codes == [EXIT_OK] * len(codes)


def test_full_pipeline_manifests(pipeline_run):
    out, _ = pipeline_run
    expected = [
        "gen-synth", "train-classifier", "precompute-affinities_features",
        "train-embedder_frozen", "train-embedder_finetune", "embed_finetune_test",
        "evaluate_frozen", "evaluate_finetune", "probe_finetune", "pca-baseline",
        "plot_embedding_embedder_finetune_test",
    ]
    for tag in expected:
        manifest = viz.read_key_values(out / f"manifest_{tag}.txt")
        assert manifest["command"] == tag
        assert len(manifest["config_hash"]) == 16
        assert any(k.startswith("output.") for k in manifest)
    # each embedder stage keeps its own training log
    for stage in ("frozen", "finetune"):
        assert (out / f"log_train-embedder_{stage}.jsonl").read_text().count("\n") >= 1


def test_pipeline_artifacts_carry_config_hash(pipeline_run):
    out, _ = pipeline_run
    h = viz.read_key_values(out / "manifest_train-classifier.txt")["config_hash"]
    assert viz.read_report(out / "report_embedder_finetune.txt").config_hash == h
    assert f"config_hash={h}" in (out / "embedding_embedder_finetune_test.csv").read_text()
    assert f"config_hash={h}" in (out / "plot_embedding_embedder_finetune_test.svg").read_text()


def test_pipeline_reports_in_range(pipeline_run):
    out, _ = pipeline_run
    for name in ("embedder_frozen", "embedder_finetune", "pca"):
        rep = viz.read_report(out / f"report_{name}.txt")
        assert 0.0 <= rep.trustworthiness <= 1.0
        assert 0.0 <= rep.knn_score <= 1.0


def test_pipeline_plot_is_valid_svg(pipeline_run):
    out, _ = pipeline_run
    _, circles, legend = svg_parts(out / "plot_embedding_embedder_finetune_test.svg")
    pts, _ = viz.read_embedding_csv(out / "embedding_embedder_finetune_test.csv")
    assert len(circles) == min(len(pts), viz.PLOT_SAMPLES)
    assert 1 <= len(legend) <= 3
