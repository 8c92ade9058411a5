"""Static SVG charts: fitted seasons, regression scatters, SHAP bar charts.

Output is plain text built from fixed-precision numbers so identical inputs
give byte-identical files.
"""

from __future__ import annotations

from html import escape
from typing import Sequence

import numpy as np

CATEGORY_COLORS = {"A": "#1f77b4", "B": "#d62728", "C": "#e6c700", "D": "#2ca02c", "E": "#ff7f0e"}
VARIABLE_COLORS = {"air_temp": "#8c564b", "precipitation": "#17becf", "irradiance": "#bcbd22", "soil": "#7f7f7f"}

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=64, right=24, top=40, bottom=56)


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, title: str, xlim, ylim, xlabel: str = "", ylabel: str = ""):
        self.xlim, self.ylim = xlim, ylim
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
            f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        ]
        x0, y0 = MARGIN["left"], HEIGHT - MARGIN["bottom"]
        x1, y1 = WIDTH - MARGIN["right"], MARGIN["top"]
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#333"/>')
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#333"/>')
        for t in np.linspace(xlim[0], xlim[1], 6):
            px = self.px(t)
            self.parts.append(f'<text x="{_f(px)}" y="{y0 + 16}" text-anchor="middle">{t:.4g}</text>')
        for t in np.linspace(ylim[0], ylim[1], 6):
            py = self.py(t)
            self.parts.append(f'<text x="{x0 - 6}" y="{_f(py + 4)}" text-anchor="end">{t:.3g}</text>')
        if xlabel:
            self.parts.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 14}" text-anchor="middle">{escape(xlabel)}</text>')
        if ylabel:
            self.parts.append(
                f'<text x="16" y="{(y0 + y1) / 2}" text-anchor="middle" '
                f'transform="rotate(-90 16 {(y0 + y1) / 2})">{escape(ylabel)}</text>'
            )

    def px(self, x: float) -> float:
        lo, hi = self.xlim
        return MARGIN["left"] + (x - lo) / (hi - lo) * (WIDTH - MARGIN["left"] - MARGIN["right"])

    def py(self, y: float) -> float:
        lo, hi = self.ylim
        return HEIGHT - MARGIN["bottom"] - (y - lo) / (hi - lo) * (HEIGHT - MARGIN["top"] - MARGIN["bottom"])

    def add(self, element: str) -> None:
        self.parts.append(element)

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>", ""])


def _limits(values, pad=0.05):
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo
    return lo - pad * span, hi + pad * span


def season_svg(title: str, weeks, ndvi, curve_x, curve_y, sos: float | None, pos: float | None) -> str:
    """Samples, fitted curve, SOS (red line) and POS (dashed line)."""
    ylim = _limits(np.concatenate([np.asarray(ndvi), np.asarray(curve_y)]))
    cv = _Canvas(title, (0.0, 52.0), ylim, "week of year", "NDVI")
    pts = " ".join(f"{_f(cv.px(x))},{_f(cv.py(y))}" for x, y in zip(curve_x, curve_y))
    cv.add(f'<polyline points="{pts}" fill="none" stroke="#2b6cb0" stroke-width="2"/>')
    for x, y in zip(weeks, ndvi):
        cv.add(f'<circle cx="{_f(cv.px(x))}" cy="{_f(cv.py(y))}" r="3" fill="#333"/>')
    for value, style in ((sos, 'stroke="#d62728" stroke-width="2"'), (pos, 'stroke="#555" stroke-dasharray="5,4"')):
        if value is not None and np.isfinite(value):
            x = _f(cv.px(value))
            cv.add(f'<line x1="{x}" y1="{MARGIN["top"]}" x2="{x}" y2="{HEIGHT - MARGIN["bottom"]}" {style}/>')
    return cv.render()


def regression_svg(title: str, x, y, categories: Sequence[str], slope: float, intercept: float, ylabel: str) -> str:
    """Scatter coloured by warming category with the fitted line."""
    cv = _Canvas(title, _limits(x), _limits(y), "annual mean soil temperature (°C)", ylabel)
    for xi, yi, cat in zip(x, y, categories):
        cv.add(f'<circle cx="{_f(cv.px(xi))}" cy="{_f(cv.py(yi))}" r="3" fill="{CATEGORY_COLORS.get(cat, "#999")}"/>')
    xs = np.array(cv.xlim)
    ys = intercept + slope * xs
    cv.add(
        f'<line x1="{_f(cv.px(xs[0]))}" y1="{_f(cv.py(ys[0]))}" x2="{_f(cv.px(xs[1]))}" '
        f'y2="{_f(cv.py(ys[1]))}" stroke="#000" stroke-width="1.5"/>'
    )
    _legend(cv, [(c, CATEGORY_COLORS[c]) for c in sorted(set(categories)) if c in CATEGORY_COLORS])
    return cv.render()


def bar_svg(title: str, labels: Sequence[str], values: Sequence[float], colors: Sequence[str], ylabel: str) -> str:
    vals = np.asarray(values, dtype=float)
    top = float(max(vals.max(), 0.0)) if vals.size else 1.0
    bottom = float(min(vals.min(), 0.0)) if vals.size else 0.0
    if top == bottom:
        top = bottom + 1.0
    cv = _Canvas(title, (0.0, float(len(labels))), (bottom, top * 1.05 if top > 0 else top), "", ylabel)
    zero = cv.py(0.0)
    for i, (lab, v, col) in enumerate(zip(labels, vals, colors)):
        x0, x1 = cv.px(i + 0.15), cv.px(i + 0.85)
        y = cv.py(v)
        cv.add(
            f'<rect x="{_f(x0)}" y="{_f(min(y, zero))}" width="{_f(x1 - x0)}" '
            f'height="{_f(abs(zero - y))}" fill="{col}"><title>{escape(lab)}: {v:.6g}</title></rect>'
        )
        cv.add(f'<text x="{_f((x0 + x1) / 2)}" y="{HEIGHT - MARGIN["bottom"] + 30}" text-anchor="middle">{escape(lab)}</text>')
    return cv.render()


def grouped_bar_svg(title: str, groups: Sequence[str], series: dict[str, Sequence[float]], colors: dict[str, str], ylabel: str) -> str:
    """One cluster per group, one bar per series key inside each cluster."""
    names = list(series)
    allv = np.array([v for s in series.values() for v in s], dtype=float)
    top = float(max(allv.max(), 0.0)) if allv.size else 1.0
    bottom = float(min(allv.min(), 0.0)) if allv.size else 0.0
    if top == bottom:
        top = bottom + 1.0
    cv = _Canvas(title, (0.0, float(len(groups))), (bottom * 1.05, top * 1.05), "", ylabel)
    zero = cv.py(0.0)
    width = 0.8 / max(1, len(names))
    for g, label in enumerate(groups):
        for k, name in enumerate(names):
            v = float(series[name][g])
            x0, x1 = cv.px(g + 0.1 + k * width), cv.px(g + 0.1 + (k + 1) * width)
            y = cv.py(v)
            cv.add(
                f'<rect x="{_f(x0)}" y="{_f(min(y, zero))}" width="{_f(x1 - x0)}" '
                f'height="{_f(abs(zero - y))}" fill="{colors.get(name, "#999")}"/>'
            )
        cv.add(f'<text x="{_f(cv.px(g + 0.5))}" y="{HEIGHT - MARGIN["bottom"] + 30}" text-anchor="middle">{escape(str(label))}</text>')
    _legend(cv, [(n, colors.get(n, "#999")) for n in names])
    return cv.render()


def _legend(cv: _Canvas, items):
    x = WIDTH - MARGIN["right"] - 110
    for i, (name, col) in enumerate(items):
        y = MARGIN["top"] + 4 + 16 * i
        cv.add(f'<rect x="{x}" y="{y}" width="10" height="10" fill="{col}"/>')
        cv.add(f'<text x="{x + 14}" y="{y + 9}">{escape(name)}</text>')
