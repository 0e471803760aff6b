"""Tiny dependency-free SVG line/bar plots with embedded data tables."""

from __future__ import annotations

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 60, 20, 30, 40

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _scale(vals, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in vals]


def _axes(title, xlo, xhi, ylo, yhi):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="monospace" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="18" text-anchor="middle">{title}</text>',
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>',
        f'<text x="{_ML - 8}" y="{_MT + 4}" text-anchor="end">{yhi:.4g}</text>',
        f'<text x="{_ML - 8}" y="{_H - _MB}" text-anchor="end">{ylo:.4g}</text>',
        f'<text x="{_ML}" y="{_H - _MB + 16}" text-anchor="middle">{xlo:.4g}</text>',
        f'<text x="{_W - _MR}" y="{_H - _MB + 16}" text-anchor="middle">{xhi:.4g}</text>',
    ]
    return parts


def line_plot(series: dict, path, title="", xlabel="", ylabel="") -> None:
    """series: name -> (xs, ys). Data embedded as a CSV comment."""
    all_x = [x for xs, _ in series.values() for x in xs]
    all_y = [y for _, ys in series.values() for y in ys]
    xlo, xhi = min(all_x), max(all_x)
    ylo, yhi = min(all_y), max(all_y)
    if ylo == yhi:
        ylo, yhi = ylo - 1, yhi + 1
    parts = ["<!--\ndata (csv):\nseries,x,y"]
    for name, (xs, ys) in series.items():
        for x, y in zip(xs, ys):
            parts.append(f"{name},{x!r},{y!r}")
    parts.append("-->")
    parts += _axes(title, xlo, xhi, ylo, yhi)
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        px = _scale(xs, xlo, xhi, _ML, _W - _MR)
        py = _scale(ys, ylo, yhi, _H - _MB, _MT)
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(px, py))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{_W - _MR - 4}" y="{_MT + 14 * (i + 1)}" text-anchor="end" fill="{color}">{name}</text>'
        )
    parts.append(f'<text x="{_W / 2}" y="{_H - 6}" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="14" y="{_H / 2}" transform="rotate(-90 14 {_H / 2})" text-anchor="middle">{ylabel}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def bar_plot(labels, heights, path, title="", ylabel="") -> None:
    ylo = min(0.0, min(heights))
    yhi = max(heights) if max(heights) > ylo else ylo + 1
    parts = ["<!--\ndata (csv):\nlabel,value"]
    for lab, h in zip(labels, heights):
        parts.append(f"{lab},{h!r}")
    parts.append("-->")
    parts += _axes(title, 0, len(labels), ylo, yhi)
    span = (_W - _ML - _MR) / len(labels)
    for i, (lab, h) in enumerate(zip(labels, heights)):
        x = _ML + i * span + span * 0.15
        (y0,) = _scale([max(h, ylo)], ylo, yhi, _H - _MB, _MT)
        (ybase,) = _scale([max(0.0, ylo)], ylo, yhi, _H - _MB, _MT)
        top, bot = min(y0, ybase), max(y0, ybase)
        parts.append(
            f'<rect x="{x:.1f}" y="{top:.1f}" width="{span * 0.7:.1f}" '
            f'height="{max(bot - top, 0.5):.1f}" fill="{_COLORS[0]}"/>'
        )
        parts.append(
            f'<text x="{x + span * 0.35:.1f}" y="{_H - _MB + 16}" text-anchor="middle">{lab}</text>'
        )
    parts.append(f'<text x="14" y="{_H / 2}" transform="rotate(-90 14 {_H / 2})" text-anchor="middle">{ylabel}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
