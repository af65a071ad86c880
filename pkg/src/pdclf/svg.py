"""Minimal SVG polyline plots; enough for state traces and region slices."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b",
           "#e377c2")


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo]
    raw = (hi - lo) / max(count - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out, v = [], start
    while v <= hi + 1e-9 * step:
        out.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return out


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _finite_limits(arrays, pad: float = 0.05) -> tuple[float, float]:
    vals = np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays]) if arrays else np.zeros(0)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


class Panel:
    """One set of axes.  Coordinates are mapped into a pixel box by the figure."""

    def __init__(self, title: str = "", xlabel: str = "", ylabel: str = "",
                 equal_aspect: bool = False):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.equal_aspect = equal_aspect
        self.series: list[tuple[str, np.ndarray, np.ndarray, str, bool]] = []

    def line(self, xs, ys, label: str = "", color: str | None = None, closed: bool = False):
        color = color or PALETTE[len(self.series) % len(PALETTE)]
        self.series.append((label, np.asarray(xs, dtype=float), np.asarray(ys, dtype=float),
                            color, closed))
        return self

    def points(self, xs, ys, label: str = "", color: str | None = None):
        color = color or PALETTE[len(self.series) % len(PALETTE)]
        self.series.append((label, np.asarray(xs, dtype=float), np.asarray(ys, dtype=float),
                            color, None))
        return self

    def render(self, x0: float, y0: float, w: float, h: float) -> list[str]:
        ml, mr, mt, mb = 60.0, 10.0, 24.0, 36.0
        pw, ph = w - ml - mr, h - mt - mb
        xlo, xhi = _finite_limits([s[1] for s in self.series])
        ylo, yhi = _finite_limits([s[2] for s in self.series])
        if self.equal_aspect:
            scale = max((xhi - xlo) / pw, (yhi - ylo) / ph)
            cx, cy = (xlo + xhi) / 2, (ylo + yhi) / 2
            xlo, xhi = cx - scale * pw / 2, cx + scale * pw / 2
            ylo, yhi = cy - scale * ph / 2, cy + scale * ph / 2

        def px(v):
            return x0 + ml + (v - xlo) / (xhi - xlo) * pw

        def py(v):
            return y0 + mt + (yhi - v) / (yhi - ylo) * ph

        out = [f'<rect x="{x0 + ml:.2f}" y="{y0 + mt:.2f}" width="{pw:.2f}" height="{ph:.2f}" '
               'fill="none" stroke="#444" stroke-width="0.8"/>']
        for t in _ticks(xlo, xhi):
            X = px(t)
            out.append(f'<line x1="{X:.2f}" y1="{y0 + mt + ph:.2f}" x2="{X:.2f}" '
                       f'y2="{y0 + mt + ph + 4:.2f}" stroke="#444"/>')
            out.append(f'<text x="{X:.2f}" y="{y0 + mt + ph + 16:.2f}" font-size="10" '
                       f'text-anchor="middle">{_fmt(t)}</text>')
        for t in _ticks(ylo, yhi):
            Y = py(t)
            out.append(f'<line x1="{x0 + ml - 4:.2f}" y1="{Y:.2f}" x2="{x0 + ml:.2f}" '
                       f'y2="{Y:.2f}" stroke="#444"/>')
            out.append(f'<text x="{x0 + ml - 6:.2f}" y="{Y + 3:.2f}" font-size="10" '
                       f'text-anchor="end">{_fmt(t)}</text>')
        if self.title:
            out.append(f'<text x="{x0 + ml + pw / 2:.2f}" y="{y0 + 16:.2f}" font-size="12" '
                       f'text-anchor="middle">{escape(self.title)}</text>')
        if self.xlabel:
            out.append(f'<text x="{x0 + ml + pw / 2:.2f}" y="{y0 + h - 4:.2f}" font-size="11" '
                       f'text-anchor="middle">{escape(self.xlabel)}</text>')
        if self.ylabel:
            out.append(f'<text x="{x0 + 12:.2f}" y="{y0 + mt + ph / 2:.2f}" font-size="11" '
                       f'text-anchor="middle" transform="rotate(-90 {x0 + 12:.2f} '
                       f'{y0 + mt + ph / 2:.2f})">{escape(self.ylabel)}</text>')
        legend_y = y0 + mt + 12
        for label, xs, ys, color, closed in self.series:
            ok = np.isfinite(xs) & np.isfinite(ys)
            if closed is None:
                for a, b in zip(xs[ok], ys[ok]):
                    out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="1.2" fill="{color}"/>')
            elif ok.sum() >= 2:
                pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs[ok], ys[ok]))
                tag = "polygon" if closed else "polyline"
                out.append(f'<{tag} points="{pts}" fill="none" stroke="{color}" '
                           'stroke-width="1.2"/>')
            if label:
                out.append(f'<text x="{x0 + ml + pw - 6:.2f}" y="{legend_y:.2f}" font-size="10" '
                           f'text-anchor="end" fill="{color}">{escape(label)}</text>')
                legend_y += 12
        return out


def figure(panels: Sequence[Panel], columns: int = 1, panel_size=(480, 260)) -> str:
    """Lay panels out on a grid and return the SVG document."""
    if not panels:
        raise ValueError("a figure needs at least one panel")
    columns = max(1, min(columns, len(panels)))
    rows = math.ceil(len(panels) / columns)
    w, h = panel_size
    body = []
    for k, p in enumerate(panels):
        r, c = divmod(k, columns)
        body.extend(p.render(c * w, r * h, w, h))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{columns * w}" height="{rows * h}" '
            f'viewBox="0 0 {columns * w} {rows * h}" font-family="sans-serif">\n'
            '<rect width="100%" height="100%" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


def trace_figure(trace) -> str:
    """States, inputs and V against time for one simulation trace."""
    t = trace.times
    states = Panel("states", "t [s]", "x")
    for i, name in enumerate(trace.state_names):
        states.line(t, trace.states[:, i], name)
    inputs = Panel("inputs", "t [s]", "u")
    for j in range(trace.inputs.shape[1]):
        inputs.line(t, trace.inputs[:, j], f"u{j + 1}")
    lyap = Panel("V", "t [s]", "V").line(t, trace.V, "V")
    return figure([states, inputs, lyap], columns=1)
