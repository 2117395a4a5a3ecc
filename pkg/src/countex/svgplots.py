"""Minimal self-contained SVG charts.

No plotting dependency: the files are small hand-built SVGs whose source data
rides along in a leading XML comment, so a run's numbers can be recovered
from the plot alone and two runs diff cleanly.
"""

from __future__ import annotations

from .jsonio import format_float

WIDTH, HEIGHT = 640, 400
MARGIN = 56
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _data_comment(header: list[str], rows: list[list[float | str]]) -> str:
    lines = ["<!-- data", "\t".join(header)]
    for row in rows:
        lines.append("\t".join(x if isinstance(x, str) else format_float(float(x)) for x in row))
    lines.append("-->")
    return "\n".join(lines)


def _frame(title: str, body: list[str], comment: str) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="monospace" font-size="12">'
    )
    frame = [
        comment,
        head,
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" '
        f'height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="#333"/>',
    ]
    frame.extend(body)
    frame.append("</svg>")
    return "\n".join(frame) + "\n"


def _scale(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def _x(frac: float) -> float:
    return MARGIN + frac * (WIDTH - 2 * MARGIN)

def _y(frac: float) -> float:
    return HEIGHT - MARGIN - frac * (HEIGHT - 2 * MARGIN)


def line_plot(path, series: dict[str, list[float]], title: str, x_label: str) -> None:
    """Multi-series line plot over a shared integer x axis."""
    n = max(len(v) for v in series.values())
    all_vals = [v for vals in series.values() for v in vals]
    lo, hi = _scale(all_vals)
    body = []
    for idx, (name, vals) in enumerate(series.items()):
        color = PALETTE[idx % len(PALETTE)]
        pts = " ".join(
            f"{_x(i / max(n - 1, 1)):.2f},{_y((v - lo) / (hi - lo)):.2f}"
            for i, v in enumerate(vals)
        )
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        body.append(
            f'<text x="{WIDTH - MARGIN + 4}" y="{MARGIN + 14 * (idx + 1)}" fill="{color}">{name}</text>'
        )
    body.append(f'<text x="{_x(0.5)}" y="{HEIGHT - 16}" text-anchor="middle">{x_label}</text>')
    body.append(f'<text x="{MARGIN - 6}" y="{_y(0.0) + 4}" text-anchor="end">{lo:.4g}</text>')
    body.append(f'<text x="{MARGIN - 6}" y="{_y(1.0) + 4}" text-anchor="end">{hi:.4g}</text>')
    header = [x_label] + list(series)
    rows = [[i] + [vals[i] if i < len(vals) else "" for vals in series.values()] for i in range(n)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_frame(title, body, _data_comment(header, rows)))


def bar_chart(path, labels: list[str], values: list[float], title: str, y_label: str) -> None:
    lo = min(0.0, min(values))
    hi = max(values) if max(values) > lo else lo + 1.0
    body = []
    n = len(values)
    for i, (label, value) in enumerate(zip(labels, values)):
        x0 = _x((i + 0.15) / n)
        x1 = _x((i + 0.85) / n)
        y1 = _y((value - lo) / (hi - lo))
        y0 = _y((0.0 - lo) / (hi - lo))
        top = min(y0, y1)
        body.append(
            f'<rect x="{x0:.2f}" y="{top:.2f}" width="{x1 - x0:.2f}" '
            f'height="{abs(y0 - y1):.2f}" fill="{PALETTE[i % len(PALETTE)]}"/>'
        )
        body.append(
            f'<text x="{(x0 + x1) / 2:.2f}" y="{HEIGHT - MARGIN + 16}" '
            f'text-anchor="middle">{label}</text>'
        )
        body.append(
            f'<text x="{(x0 + x1) / 2:.2f}" y="{top - 4:.2f}" text-anchor="middle">{value:.3g}</text>'
        )
    body.append(f'<text x="16" y="{_y(0.5)}" writing-mode="tb">{y_label}</text>')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_frame(title, body, _data_comment(["label", y_label], [[l, v] for l, v in zip(labels, values)])))


def scatter_plot(path, xs: list[float], ys: list[float], title: str, x_label: str, y_label: str) -> None:
    lo, hi = _scale(list(xs) + list(ys))
    body = [
        f'<line x1="{_x(0):.2f}" y1="{_y(0):.2f}" x2="{_x(1):.2f}" y2="{_y(1):.2f}" '
        f'stroke="#bbb" stroke-dasharray="4 3"/>'
    ]
    for x, y in zip(xs, ys):
        fx = (x - lo) / (hi - lo)
        fy = (y - lo) / (hi - lo)
        body.append(f'<circle cx="{_x(fx):.2f}" cy="{_y(fy):.2f}" r="3" fill="#1f77b4" fill-opacity="0.6"/>')
    body.append(f'<text x="{_x(0.5)}" y="{HEIGHT - 16}" text-anchor="middle">{x_label}</text>')
    body.append(f'<text x="16" y="{_y(0.5)}" writing-mode="tb">{y_label}</text>')
    body.append(f'<text x="{MARGIN - 6}" y="{_y(0.0) + 4}" text-anchor="end">{lo:.4g}</text>')
    body.append(f'<text x="{MARGIN - 6}" y="{_y(1.0) + 4}" text-anchor="end">{hi:.4g}</text>')
    rows = [[x, y] for x, y in zip(xs, ys)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_frame(title, body, _data_comment([x_label, y_label], rows)))
