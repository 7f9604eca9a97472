"""Minimal self-contained SVG log-log scatter with fitted lines."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

from .numkit import ScalingFit

WIDTH, HEIGHT = 640, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 170, 40, 55
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _f(v: float) -> str:
    return f"{v:.2f}"


def loglog_svg(series: dict[str, list[tuple[float, float]]], fits: dict[str, ScalingFit | None],
               title: str = "", ylabel: str = "") -> str:
    """Scatter of (width, value) per series on log2 axes, each with its fitted
    line and slope annotation. Output is deterministic for fixed input."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("nothing to plot")
    lx = [math.log2(w) for w, _ in pts]
    ly = [math.log2(v) for _, v in pts]
    x0, x1 = math.floor(min(lx)), math.ceil(max(lx))
    y0, y1 = math.floor(min(ly)), math.ceil(max(ly))
    if x1 == x0:
        x1 += 1
    if y1 == y0:
        y1 += 1
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def px(lw):
        return MARGIN_L + (lw - x0) / (x1 - x0) * pw

    def py(lv):
        return MARGIN_T + (y1 - lv) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    if title:
        out.append(f'<text x="{MARGIN_L}" y="{MARGIN_T - 14}" font-size="14">{escape(title)}</text>')
    ystep = max(1, math.ceil((y1 - y0) / 10))
    for k in range(x0, x1 + 1):
        x = _f(px(k))
        out.append(f'<line x1="{x}" y1="{MARGIN_T + ph}" x2="{x}" y2="{MARGIN_T + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{MARGIN_T + ph + 18}" text-anchor="middle">2^{k}</text>')
    for k in range(y0, y1 + 1, ystep):
        y = _f(py(k))
        out.append(f'<line x1="{MARGIN_L - 5}" y1="{y}" x2="{MARGIN_L}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{MARGIN_L - 8}" y="{y}" text-anchor="end" dominant-baseline="middle">2^{k}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">width</text>')
    if ylabel:
        out.append(f'<text x="16" y="{MARGIN_T + ph / 2:.2f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {MARGIN_T + ph / 2:.2f})">{escape(ylabel)}</text>')

    for i, (label, s) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        for w, v in s:
            out.append(f'<circle cx="{_f(px(math.log2(w)))}" cy="{_f(py(math.log2(v)))}" r="4" fill="{color}"/>')
        fit = fits.get(label)
        legend_y = MARGIN_T + 16 + 18 * i
        text = escape(label)
        if fit is not None:
            # ln v = a + b ln w  ->  log2 v = a / ln2 + b log2 w
            a2 = fit.intercept / math.log(2)
            xs = [math.log2(w) for w, _ in s]
            xa, xb = min(xs), max(xs)
            out.append(f'<line x1="{_f(px(xa))}" y1="{_f(py(a2 + fit.slope * xa))}" '
                       f'x2="{_f(px(xb))}" y2="{_f(py(a2 + fit.slope * xb))}" '
                       f'stroke="{color}" stroke-dasharray="5,3"/>')
            text += f": slope {fit.slope:.3f} ± {fit.slope_stderr:.3f}"
        out.append(f'<text x="{WIDTH - MARGIN_R + 10}" y="{legend_y}" fill="{color}">{text}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
