"""Forest plot of log odds ratios as a standalone SVG 1.1 document.

The SVG is written by hand so that identical tables give byte-identical files.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import List
from xml.sax.saxutils import escape

from .inference import EffectTable

ROW_H = 22
TOP = 48
LEFT = 230
PLOT_W = 380
RIGHT_W = 190
BOTTOM = 44


def _ticks(lo: float, hi: float) -> List[float]:
    span = hi - lo
    raw = span / 6
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12:
        out.append(round(v, 10) + 0.0)
        v += step
    return out


def _f(v: float) -> str:
    return f"{v:.2f}"


def render_forest(table: EffectTable, title: str = "") -> str:
    """SVG text: one point per assessable effect with CI whiskers, a zero line and stars."""
    if not len(table):
        raise ValueError("forest plot needs a non-empty effect table")
    xlabel = "log(OR)" if table.model == "glmm" else "estimate"
    finite = [(r.ci_low, r.ci_high) for r in table.rows if not r.dropped and math.isfinite(r.ci_low) and math.isfinite(r.ci_high)]
    lo = min([0.0] + [a for a, _ in finite])
    hi = max([0.0] + [b for _, b in finite])
    if hi - lo < 1e-9:
        lo, hi = -1.0, 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def sx(v: float) -> float:
        v = min(max(v, lo), hi)
        return LEFT + (v - lo) / (hi - lo) * PLOT_W

    n = len(table.rows)
    width = LEFT + PLOT_W + RIGHT_W
    height = TOP + n * ROW_H + BOTTOM
    y_end = TOP + n * ROW_H
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="Helvetica, Arial, sans-serif" font-size="12">',
        "<style>.point{fill:#1f3b73}.ci{stroke:#1f3b73;stroke-width:1.5}.zero{stroke:#888;stroke-dasharray:4 3}"
        ".grid{stroke:#ddd}.stars{fill:#b22222;font-weight:bold}.na{fill:#999}</style>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    heading = title or f"{table.model.upper()} {table.perspective} ({table.subset})".strip()
    out.append(f'<text x="{_f(width / 2)}" y="22" text-anchor="middle" font-size="14">{escape(heading)}</text>')
    for t in _ticks(lo, hi):
        x = _f(sx(t))
        out.append(f'<line class="grid" x1="{x}" y1="{TOP}" x2="{x}" y2="{y_end}"/>')
        out.append(f'<text x="{x}" y="{y_end + 16}" text-anchor="middle">{t:g}</text>')
    x0 = _f(sx(0.0))
    out.append(f'<line class="zero" x1="{x0}" y1="{TOP - 6}" x2="{x0}" y2="{y_end}"/>')
    out.append(f'<text x="{_f(LEFT + PLOT_W / 2)}" y="{y_end + 34}" text-anchor="middle">{escape(xlabel)}</text>')
    for i, r in enumerate(table.rows):
        y = TOP + i * ROW_H + ROW_H / 2
        out.append(f'<text x="{LEFT - 10}" y="{_f(y + 4)}" text-anchor="end">{escape(r.name)}</text>')
        if r.dropped or not math.isfinite(r.beta):
            out.append(f'<text class="na" x="{x0}" y="{_f(y + 4)}" text-anchor="middle">x</text>')
            continue
        if math.isfinite(r.ci_low) and math.isfinite(r.ci_high):
            out.append(f'<line class="ci" x1="{_f(sx(r.ci_low))}" y1="{_f(y)}" x2="{_f(sx(r.ci_high))}" y2="{_f(y)}"/>')
        out.append(f'<circle class="point" cx="{_f(sx(r.beta))}" cy="{_f(y)}" r="4"/>')
        label = f"{r.beta:.3f} [{r.ci_low:.3f}, {r.ci_high:.3f}]"
        out.append(f'<text x="{LEFT + PLOT_W + 12}" y="{_f(y + 4)}">{escape(label)}</text>')
        if r.stars:
            out.append(f'<text class="stars" x="{width - 14}" y="{_f(y + 4)}" text-anchor="end">{escape(r.stars)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def forest_plot(table: EffectTable, out_path, title: str = "") -> Path:
    """Write the forest plot; raises OSError when the path cannot be written."""
    path = Path(out_path)
    text = render_forest(table, title)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path
