"""Deterministic SVG heatmaps and bar charts, and PGM export of attention maps.

Only string formatting is involved, so identical inputs give identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

CELL = 44
MARGIN = 60


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "n/a"
    return f"{x:.2f}"


def _color(v: float, lo: float, hi: float) -> str:
    """White -> dark blue ramp."""
    t = 0.0 if hi <= lo or not np.isfinite(v) else (v - lo) / (hi - lo)
    t = min(max(t, 0.0), 1.0)
    r = round(255 - t * (255 - 33))
    g = round(255 - t * (255 - 102))
    b = round(255 - t * (255 - 172))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(matrix, std=None, row_labels=None, col_labels=None, title: str = "",
                vmin: float | None = None, vmax: float | None = None) -> str:
    """Grid with the value (top) and optional std (bottom) printed in each cell."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if m.ndim != 2:
        raise ValueError("heatmap needs a 2-D matrix")
    s = None if std is None else np.atleast_2d(np.asarray(std, dtype=np.float64))
    if s is not None and s.shape != m.shape:
        raise ValueError("std must match the matrix shape")
    rows, cols = m.shape
    finite = m[np.isfinite(m)]
    lo = vmin if vmin is not None else (float(finite.min()) if finite.size else 0.0)
    hi = vmax if vmax is not None else (float(finite.max()) if finite.size else 1.0)
    row_labels = row_labels or [str(i) for i in range(rows)]
    col_labels = col_labels or [str(j) for j in range(cols)]
    width = MARGIN + cols * CELL + 10
    height = MARGIN + rows * CELL + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="monospace" font-size="10">']
    if title:
        out.append(f'<text x="{width // 2}" y="14" text-anchor="middle" font-size="12">{escape(title)}</text>')
    for j, lab in enumerate(col_labels):
        x = MARGIN + j * CELL + CELL // 2
        out.append(f'<text x="{x}" y="{MARGIN - 8}" text-anchor="middle">{escape(str(lab))}</text>')
    for i, lab in enumerate(row_labels):
        y = MARGIN + i * CELL + CELL // 2 + 4
        out.append(f'<text x="{MARGIN - 6}" y="{y}" text-anchor="end">{escape(str(lab))}</text>')
    for i in range(rows):
        for j in range(cols):
            x, y = MARGIN + j * CELL, MARGIN + i * CELL
            v = m[i, j]
            ink = "#ffffff" if np.isfinite(v) and hi > lo and (v - lo) / (hi - lo) > 0.6 else "#000000"
            out.append(f'<g class="cell" data-row="{i}" data-col="{j}">')
            out.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{_color(v, lo, hi)}" '
                       'stroke="#888888" stroke-width="0.5"/>')
            ty = y + (CELL // 2 - 2 if s is not None else CELL // 2 + 4)
            out.append(f'<text x="{x + CELL // 2}" y="{ty}" text-anchor="middle" fill="{ink}">{_fmt(v)}</text>')
            if s is not None:
                out.append(f'<text x="{x + CELL // 2}" y="{y + CELL // 2 + 12}" text-anchor="middle" '
                           f'fill="{ink}" font-size="8">{_fmt(s[i, j])}</text>')
            out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_heatmap(matrix, path, std=None, **kwargs) -> str:
    svg = heatmap_svg(matrix, std, **kwargs)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(svg)
    return svg


_PALETTE = ["#2166ac", "#b2182b", "#999999", "#1b7837", "#762a83", "#e08214"]


def bar_chart_svg(groups: dict, title: str = "", height: int = 220) -> str:
    """Grouped bars with error whiskers.

    ``groups`` maps a group label to ``{series: (mean, std)}``; series order
    follows first appearance.
    """
    series = []
    for values in groups.values():
        for name in values:
            if name not in series:
                series.append(name)
    means = [v[0] for g in groups.values() for v in g.values() if v[0] is not None and np.isfinite(v[0])]
    lo = min(0.0, min(means, default=0.0))
    hi = max(1.0, max(means, default=1.0))
    bar = 14
    gap = 18
    group_w = bar * len(series) + gap
    width = MARGIN + group_w * len(groups) + 120
    top, plot_h = 30, height - 70

    def y_of(v):
        return top + plot_h * (hi - v) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="monospace" font-size="10">']
    if title:
        out.append(f'<text x="{width // 2}" y="14" text-anchor="middle" font-size="12">{escape(title)}</text>')
    out.append(f'<line x1="{MARGIN}" y1="{y_of(0.0):.1f}" x2="{width - 120}" y2="{y_of(0.0):.1f}" stroke="#000000"/>')
    for tick in np.linspace(lo, hi, 5):
        out.append(f'<text x="{MARGIN - 6}" y="{y_of(tick) + 3:.1f}" text-anchor="end">{tick:.2f}</text>')
    for gi, (gname, values) in enumerate(groups.items()):
        gx = MARGIN + gi * group_w + gap // 2
        out.append(f'<g class="group" data-group="{escape(str(gname))}">')
        for si, name in enumerate(series):
            if name not in values:
                continue
            mean, std = values[name]
            if mean is None or not np.isfinite(mean):
                continue
            x = gx + si * bar
            y0, y1 = sorted((y_of(0.0), y_of(mean)))
            out.append(f'<rect class="bar" x="{x}" y="{y0:.1f}" width="{bar - 2}" height="{y1 - y0:.1f}" '
                       f'fill="{_PALETTE[si % len(_PALETTE)]}"/>')
            if std:
                cx = x + (bar - 2) / 2
                out.append(f'<line x1="{cx:.1f}" y1="{y_of(mean - std):.1f}" x2="{cx:.1f}" '
                           f'y2="{y_of(mean + std):.1f}" stroke="#000000"/>')
        out.append(f'<text x="{gx + bar * len(series) / 2:.1f}" y="{height - 24}" '
                   f'text-anchor="middle">{escape(str(gname))}</text>')
        out.append("</g>")
    for si, name in enumerate(series):
        y = top + 14 * si
        out.append(f'<rect x="{width - 110}" y="{y}" width="10" height="10" fill="{_PALETTE[si % len(_PALETTE)]}"/>')
        out.append(f'<text x="{width - 95}" y="{y + 9}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_bar_chart(groups: dict, path, title: str = "") -> str:
    svg = bar_chart_svg(groups, title)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(svg)
    return svg


def write_pgm(matrix, path, scale: int = 8):
    """Binary 8-bit grayscale image, each entry a ``scale`` x ``scale`` block;
    the largest entry is white."""
    m = np.asarray(matrix, dtype=np.float64)
    peak = m.max() if m.size and m.max() > 0 else 1.0
    img = np.round(255 * np.clip(m / peak, 0, 1)).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    h, w = img.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
