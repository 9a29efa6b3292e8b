"""Summaries across seeds and self-contained SVG line plots."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

PLOT_METRICS = ("expected_shd", "expected_shd_c", "tpr", "fdr", "wasserstein")
_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#7f7f7f")


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no values")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def summarize(rows) -> List[dict]:
    groups: Dict[tuple, List[float]] = defaultdict(list)
    for r in rows:
        groups[(r.experiment, r.variant, r.d, r.n, r.metric)].append(r.value)
    out = []
    for (experiment, variant, d, n, metric), values in sorted(groups.items()):
        mean, std = mean_std(values)
        out.append({"experiment": experiment, "variant": variant, "d": d, "n": n, "metric": metric,
                    "mean": mean, "std": std, "count": len(values)})
    return out


def report(output_dir) -> List[dict]:
    """Aggregate ``results.csv`` into ``summary.txt`` and ``summary.csv``."""
    from dagvi.experiments import read_rows

    output_dir = Path(output_dir)
    path = output_dir / "results.csv"
    if not path.is_file():
        raise FileNotFoundError(f"{output_dir} has no results.csv")
    rows = read_rows(path)
    if not rows:
        raise ValueError(f"{path} contains no result rows")
    table = summarize(rows)
    keys = ["experiment", "variant", "d", "n", "metric", "mean", "std", "count"]
    with open(output_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(table)
    (output_dir / "summary.txt").write_text(format_table(table))
    return table


def format_table(table: List[dict]) -> str:
    header = f"{'experiment':<14} {'variant':<13} {'d':>4} {'n':>6} {'metric':<16} {'mean +- std':>22} {'seeds':>5}"
    lines = [header, "-" * len(header)]
    for t in table:
        cell = f"{t['mean']:.4g} +- {t['std']:.3g}"
        lines.append(f"{t['experiment']:<14} {t['variant']:<13} {t['d']:>4} {t['n']:>6} "
                     f"{t['metric']:<16} {cell:>22} {t['count']:>5}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# SVG
# --------------------------------------------------------------------------

def _ticks(lo: float, hi: float, count: int = 5) -> List[float]:
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / count))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= count:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def line_plot_svg(series: Dict[str, List[Tuple[float, float, float]]], xlabel: str, ylabel: str,
                  title: str = "", width: int = 480, height: int = 340) -> str:
    """Polyline per series with +-1 std error bars.  ``series`` maps a label
    to ``(x, mean, std)`` points."""
    left, right, top, bottom = 64, 120, 36, 52
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("nothing to plot")
    xs = [p[0] for p in pts]
    ylo = min(p[1] - p[2] for p in pts)
    yhi = max(p[1] + p[2] for p in pts)
    xlo, xhi = min(xs), max(xs)
    if xhi == xlo:
        xlo, xhi = xlo - 1, xhi + 1
    if yhi == ylo:
        ylo, yhi = ylo - 1, yhi + 1
    pad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - pad, yhi + pad
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - xlo) / (xhi - xlo) * pw

    def sy(y):
        return top + (1 - (y - ylo) / (yhi - ylo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left + pw / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for t in _ticks(ylo, yhi):
        y = sy(t)
        out.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 7}" y="{y + 4:.1f}" text-anchor="end">{t:g}</text>')
    for t in sorted(set(xs)):
        x = sx(t)
        out.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text transform="translate(16,{top + ph / 2}) rotate(-90)" text-anchor="middle">'
               f'{escape(ylabel)}</text>')

    for k, (label, points) in enumerate(sorted(series.items())):
        colour = _COLOURS[k % len(_COLOURS)]
        points = sorted(points)
        coords = " ".join(f"{sx(x):.1f},{sy(m):.1f}" for x, m, _ in points)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        for x, m, s in points:
            cx = sx(x)
            out.append(f'<line x1="{cx:.1f}" y1="{sy(m - s):.1f}" x2="{cx:.1f}" y2="{sy(m + s):.1f}" '
                       f'stroke="{colour}"/>')
            out.append(f'<circle cx="{cx:.1f}" cy="{sy(m):.1f}" r="3" fill="{colour}"/>')
        ly = top + 14 * k + 6
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 26}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 30}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_results(rows, output_dir) -> List[Path]:
    """One SVG per metric: mean +- std across seeds against d (or n when
    only n varies), one line per variant."""
    output_dir = Path(output_dir)
    table = summarize(rows)
    ds = {t["d"] for t in table}
    axis = "n" if len(ds) == 1 and len({t["n"] for t in table}) > 1 else "d"
    written = []
    for metric in PLOT_METRICS:
        series: Dict[str, List[Tuple[float, float, float]]] = defaultdict(list)
        for t in table:
            if t["metric"] == metric:
                series[t["variant"]].append((float(t[axis]), t["mean"], t["std"]))
        if not series:
            continue
        path = output_dir / f"{metric}_vs_{axis}.svg"
        path.write_text(line_plot_svg(series, axis, metric.replace("_", " "), title=metric))
        written.append(path)
    return written
