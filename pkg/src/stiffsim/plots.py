"""Minimal self-contained SVG line plots."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 160, 40, 50
MAX_POINTS = 4000


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=mag)
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def _thin(x, y):
    if len(x) <= MAX_POINTS:
        return x, y
    idx = np.linspace(0, len(x) - 1, MAX_POINTS).astype(int)
    return x[idx], y[idx]


def line_plot(series: dict, title="", xlabel="", ylabel="", logx=False, logy=False,
              markers=False) -> str:
    """Render ``{label: (x, y)}`` as an SVG document string."""
    data = {}
    for label, (x, y) in series.items():
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        if logx:
            ok &= x > 0
        if logy:
            ok &= y > 0
        x, y = x[ok], y[ok]
        if logx:
            x = np.log10(x)
        if logy:
            y = np.log10(y)
        data[label] = _thin(x, y)
    xs = np.concatenate([v[0] for v in data.values()] or [np.zeros(1)])
    ys = np.concatenate([v[1] for v in data.values()] or [np.zeros(1)])
    if xs.size == 0:
        xs = ys = np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(v):
        return LEFT + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return TOP + (y1 - v) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{LEFT + pw / 2}" y="{TOP - 14}" text-anchor="middle" font-size="13">'
           f'{escape(title)}</text>',
           f'<text x="{LEFT + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle">'
           f'{escape(xlabel)}</text>',
           f'<text x="16" y="{TOP + ph / 2}" text-anchor="middle" '
           f'transform="rotate(-90 16 {TOP + ph / 2})">{escape(ylabel)}</text>']
    for v in _ticks(x0, x1):
        X = sx(v)
        lab = f"1e{v:g}" if logx else f"{v:g}"
        out.append(f'<line x1="{X:.2f}" y1="{TOP + ph}" x2="{X:.2f}" y2="{TOP + ph + 4}" '
                   'stroke="black"/>')
        out.append(f'<text x="{X:.2f}" y="{TOP + ph + 16}" text-anchor="middle">{lab}</text>')
    for v in _ticks(y0, y1):
        Y = sy(v)
        lab = f"1e{v:.3g}" if logy else f"{v:.4g}"
        out.append(f'<line x1="{LEFT - 4}" y1="{Y:.2f}" x2="{LEFT}" y2="{Y:.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{Y + 4:.2f}" text-anchor="end">{lab}</text>')
    for k, (label, (x, y)) in enumerate(data.items()):
        color = PALETTE[k % len(PALETTE)]
        if len(x):
            pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                       'stroke-width="1.2"/>')
            if markers:
                out.extend(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="{color}"/>'
                           for a, b in zip(x, y))
        ly = TOP + 14 + 16 * k
        out.append(f'<line x1="{LEFT + pw + 10}" y1="{ly - 4}" x2="{LEFT + pw + 28}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 32}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
