"""Summary tables and the accuracy-per-phase SVG chart."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from .evaluation import RunMetrics, average_accuracy, read_metrics_csv

COLORS = ("#1f77b4", "#2ca02c", "#d62728", "#9467bd")


def chart_series(metrics: RunMetrics) -> dict[str, list[float]]:
    """Seen-class average and first-phase-class accuracy after each phase."""
    phases = sorted(metrics.acc)
    return {
        "all seen classes": [metrics.seen_average(t) for t in phases],
        "phase-1 classes": [metrics.acc[t][0] for t in phases],
    }


def render_svg(series: dict[str, list[float]], num_phases: int, title: str = "Linear-probe accuracy per phase") -> str:
    width, height = 520, 340
    left, right, top, bottom = 60, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    values = [v for ys in series.values() for v in ys]
    lo = max(0.0, min(values) - 0.05) if values else 0.0
    hi = min(1.0, max(values) + 0.05) if values else 1.0
    if hi - lo < 1e-9:
        lo, hi = max(0.0, lo - 0.05), min(1.0, hi + 0.05)

    def x_of(t: int) -> float:
        return left + (pw * t / (num_phases - 1) if num_phases > 1 else pw / 2)

    def y_of(v: float) -> float:
        return top + ph * (hi - v) / (hi - lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in range(num_phases):
        x = x_of(t)
        out.append(f'<line class="xtick" x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text class="xtick-label" x="{x:.1f}" y="{top + ph + 18}" text-anchor="middle" font-size="11">{t + 1}</text>')
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        y = y_of(v)
        out.append(f'<line x1="{left - 5}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{100 * v:.1f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">phase</text>')
    out.append(
        f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {top + ph / 2:.1f})">top-1 accuracy (%)</text>'
    )
    for k, (name, ys) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{x_of(t):.1f},{y_of(v):.1f}" for t, v in enumerate(ys))
        out.append(f'<polyline class="series" data-name="{escape(name)}" fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        for t, v in enumerate(ys):
            out.append(f'<circle cx="{x_of(t):.1f}" cy="{y_of(v):.1f}" r="3" fill="{color}"/>')
        ly = top + 14 + 18 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(metrics: RunMetrics, path, baseline: RunMetrics | None = None) -> None:
    series = chart_series(metrics)
    if baseline is not None:
        series["baseline: all seen classes"] = chart_series(baseline)["all seen classes"]
    Path(path).write_text(render_svg(series, metrics.num_phases))


def summary_table(metrics: RunMetrics, baseline: RunMetrics | None = None) -> str:
    T = metrics.num_phases
    header = "after phase | " + " | ".join(f"P{i + 1:<5d}" for i in range(T)) + " | seen avg"
    lines = [header, "-" * len(header)]
    for t in sorted(metrics.acc):
        cells = [f"{100 * metrics.acc[t][i]:6.2f}" if i in metrics.acc[t] else "      " for i in range(T)]
        lines.append(f"{t + 1:>11d} | " + " | ".join(cells) + f" | {100 * metrics.seen_average(t):6.2f}")
    if T - 1 in metrics.acc:
        lines.append(f"A_T = {100 * average_accuracy(metrics):.2f}")
    if baseline is not None and T - 1 in baseline.acc:
        lines.append(f"baseline A_T = {100 * average_accuracy(baseline):.2f}")
    return "\n".join(lines)


def report(metrics_dir, baseline_dir=None) -> str:
    """Print-ready summary; also (re)writes ``chart.svg`` in ``metrics_dir``."""
    metrics_dir = Path(metrics_dir)
    metrics, _ = read_metrics_csv(metrics_dir / "metrics.csv")
    baseline = None
    if baseline_dir is not None:
        baseline, _ = read_metrics_csv(Path(baseline_dir) / "metrics.csv")
    write_chart(metrics, metrics_dir / "chart.svg", baseline)
    return summary_table(metrics, baseline)
