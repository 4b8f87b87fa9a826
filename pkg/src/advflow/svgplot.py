"""Minimal self-contained SVG line and step plots.

Output depends only on the numbers passed in, so plots regenerated from the
same CSV are byte-identical.
"""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=64, right=16, top=36, bottom=48)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v):
    return f"{v:.2f}"


def _nice_ticks(lo, hi, count=5):
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return ticks


def _tick_label(v):
    return f"{v:.6g}"


def _bounds(series):
    xs = [x for _, pts, _ in series for x, y in pts if math.isfinite(x) and math.isfinite(y)]
    ys = [y for _, pts, _ in series for x, y in pts if math.isfinite(x) and math.isfinite(y)]
    if not xs:
        return 0.0, 1.0, 0.0, 1.0
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    return x0, x1, y0 - pad, y1 + pad


def line_plot(series, title="", xlabel="", ylabel="", steps=False):
    """Render ``series``: a list of ``(label, [(x, y), ...], dashed)`` tuples.

    Non-finite points break the polyline. ``steps`` draws histogram-style
    staircases instead of straight segments.
    """
    x0, x1, y0, y1 = _bounds(series)
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (y1 - y) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
           'fill="none" stroke="#444"/>']
    for t in _nice_ticks(x0, x1):
        x = px(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{MARGIN["top"] + ph}" x2="{_fmt(x)}" '
                   f'y2="{MARGIN["top"] + ph + 5}" stroke="#444"/>')
        out.append(f'<text x="{_fmt(x)}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle">'
                   f'{_tick_label(t)}</text>')
    for t in _nice_ticks(y0, y1):
        y = py(t)
        out.append(f'<line x1="{MARGIN["left"] - 5}" y1="{_fmt(y)}" x2="{MARGIN["left"]}" '
                   f'y2="{_fmt(y)}" stroke="#444"/>')
        out.append(f'<text x="{MARGIN["left"] - 8}" y="{_fmt(y + 4)}" text-anchor="end">'
                   f'{_tick_label(t)}</text>')
    if title:
        out.append(f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">'
                   f'{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 10}" '
                   f'text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        cy = MARGIN["top"] + ph / 2
        out.append(f'<text x="16" y="{cy:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {cy:.1f})">{escape(ylabel)}</text>')

    for i, (label, pts, dashed) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        dash = ' stroke-dasharray="6 4"' if dashed else ""
        runs, cur = [], []
        for x, y in pts:
            if math.isfinite(x) and math.isfinite(y):
                cur.append((x, y))
            elif cur:
                runs.append(cur)
                cur = []
        if cur:
            runs.append(cur)
        for run in runs:
            if steps:
                coords = []
                for (xa, ya), (xb, _) in zip(run, run[1:] + [run[-1]]):
                    coords += [(xa, ya), (xb, ya)]
            else:
                coords = run
            d = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in coords)
            out.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
        ly = MARGIN["top"] + 14 + 16 * i
        lx = MARGIN["left"] + pw - 150
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" '
                   f'stroke-width="2"{dash}/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
