"""SVG scatter plots, embedding CSV files and evaluation report files."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES
from .errors import ContractError, DataError, ParseError
from .metrics import EvalReport, subsample

DEFAULT_COLORS = {"down": "#d62728", "stationary": "#7f7f7f", "up": "#2ca02c"}
PLOT_SAMPLES = 7500
CANVAS = 560.0
LEGEND_WIDTH = 140.0
MARGIN = 0.05
RADIUS = 2


@dataclass
class ScatterPlot:
    points: np.ndarray  # [n, 2]
    labels: np.ndarray  # 0-based class indices
    class_names: tuple = CLASS_NAMES
    colors: dict = field(default_factory=lambda: dict(DEFAULT_COLORS))
    title: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.points) != len(self.labels):
            raise DataError(f"{len(self.points)} points but {len(self.labels)} labels")

    def color(self, label):
        name = self.class_names[label] if label < len(self.class_names) else str(label)
        return self.colors.get(name, "#1f77b4")


def make_scatter(points, labels, max_points=PLOT_SAMPLES, seed=0, **kwargs):
    """Build a plot from at most ``max_points`` points, subsampled without replacement."""
    idx = subsample(len(points), max_points, seed)
    return ScatterPlot(np.asarray(points)[idx], np.asarray(labels)[idx], **kwargs)


def _fmt(v):
    return f"{v:.3f}"


def render_scatter_svg(plot, path, config_hash=None):
    """Write a standalone SVG: one circle per point plus a legend of the classes present."""
    if len(plot.points) == 0:
        raise ContractError("cannot render an empty scatter plot")
    lo = plot.points.min(axis=0)
    hi = plot.points.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    lo = lo - MARGIN * span
    span = span * (1 + 2 * MARGIN)
    px = (plot.points[:, 0] - lo[0]) / span[0] * CANVAS
    py = CANVAS - (plot.points[:, 1] - lo[1]) / span[1] * CANVAS

    width = CANVAS + LEGEND_WIDTH
    svg = ET.Element(
        "svg",
        {
            "xmlns": "http://www.w3.org/2000/svg",
            "width": _fmt(width),
            "height": _fmt(CANVAS),
            "viewBox": f"0 0 {_fmt(width)} {_fmt(CANVAS)}",
        },
    )
    if config_hash:
        ET.SubElement(svg, "metadata").text = f"config_hash={config_hash}"
    if plot.title:
        ET.SubElement(svg, "title").text = plot.title
    ET.SubElement(svg, "rect", {"x": "0", "y": "0", "width": _fmt(CANVAS), "height": _fmt(CANVAS), "fill": "white", "stroke": "#cccccc"})
    points = ET.SubElement(svg, "g", {"class": "points"})
    for x, y, c in zip(px, py, plot.labels):
        ET.SubElement(points, "circle", {"cx": _fmt(x), "cy": _fmt(y), "r": str(RADIUS), "fill": plot.color(c)})
    legend = ET.SubElement(svg, "g", {"class": "legend"})
    for row, c in enumerate(np.unique(plot.labels)):
        entry = ET.SubElement(legend, "g", {"class": "legend-entry"})
        y = 20 + 20 * row
        ET.SubElement(entry, "rect", {"x": _fmt(CANVAS + 12), "y": _fmt(y - 9), "width": "10", "height": "10", "fill": plot.color(c)})
        label = ET.SubElement(entry, "text", {"x": _fmt(CANVAS + 28), "y": _fmt(y), "font-family": "sans-serif", "font-size": "12"})
        label.text = plot.class_names[c] if c < len(plot.class_names) else str(c)
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
    return path


# ---------------------------------------------------------------- embedding CSV


def write_embedding_csv(points, labels, path, config_hash=None):
    """``x,y,label`` rows (0-based class index); an optional ``#`` line carries the config hash."""
    with open(path, "w") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("x,y,label\n")
        for (x, y), c in zip(np.asarray(points), np.asarray(labels)):
            fh.write(f"{float(x)!r},{float(y)!r},{int(c)}\n")
    return path


def read_embedding_csv(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not lines or lines[0].strip() != "x,y,label":
        raise ParseError("embedding CSV must start with header x,y,label", 1)
    pts, labels = [], []
    for r, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        try:
            pts.append((float(cells[0]), float(cells[1])))
            labels.append(int(cells[2]))
        except (ValueError, IndexError):
            raise ParseError("malformed embedding row", r) from None
    return np.array(pts).reshape(-1, 2), np.array(labels, dtype=int)


# ---------------------------------------------------------------- reports


def _value(v):
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_report(report):
    lines = ["# evaluation report"]
    lines += [f"{k} = {_value(v)}" for k, v in report.to_dict().items()]
    lines.append(f"record = {report.to_record()}")
    return "\n".join(lines) + "\n"


def write_report(report, path):
    """Human-readable ``key = value`` block followed by a one-line JSON record."""
    Path(path).write_text(format_report(report))
    return path


def read_report(path):
    for line in Path(path).read_text().splitlines():
        if line.startswith("record = "):
            return EvalReport.from_record(line[len("record = ") :])
    raise ParseError(f"{path}: no machine-readable record line")


def read_key_values(path):
    """Parse a flat ``key = value`` file (``#`` starts a comment)."""
    out = {}
    for r, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("record") else raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", r)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
