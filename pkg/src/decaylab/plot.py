"""Dependency-free SVG line charts."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence
from xml.sax.saxutils import escape

from decaylab.errors import ValidationError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


@dataclass(frozen=True)
class Axes:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    width: int = 640
    height: int = 400
    margin_left: int = 70
    margin_right: int = 150
    margin_top: int = 40
    margin_bottom: int = 50
    vlines: tuple[float, ...] = ()
    xlim: Optional[tuple[float, float]] = None
    ylim: Optional[tuple[float, float]] = None


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.1e}"
    return f"{v:.4g}"


def nice_ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / target
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step - 1e-9)
    ticks = []
    k = start
    while k * step <= hi + 1e-9 * step:
        ticks.append(round(k * step, 12))
        k += 1
    return ticks


class Frame:
    """Maps data coordinates onto the plot area of an :class:`Axes`."""

    def __init__(self, axes: Axes, xlim: tuple[float, float], ylim: tuple[float, float]):
        self.axes = axes
        x0, x1 = xlim
        y0, y1 = ylim
        if x1 == x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 == y0:
            pad = abs(y0) * 0.05 or 0.5
            y0, y1 = y0 - pad, y1 + pad
        self.xlim, self.ylim = (x0, x1), (y0, y1)
        self.left = axes.margin_left
        self.right = axes.width - axes.margin_right
        self.top = axes.margin_top
        self.bottom = axes.height - axes.margin_bottom

    def x(self, v: float) -> float:
        x0, x1 = self.xlim
        return self.left + (v - x0) / (x1 - x0) * (self.right - self.left)

    def y(self, v: float) -> float:
        y0, y1 = self.ylim
        return self.bottom - (v - y0) / (y1 - y0) * (self.bottom - self.top)


def frame_for(series: Sequence[tuple[str, Sequence[tuple[float, float]]]], axes: Axes) -> Frame:
    xs = [x for _, pts in series for x, _ in pts]
    ys = [y for _, pts in series for _, y in pts if math.isfinite(y)]
    xlim = axes.xlim or (min(xs), max(xs))
    if axes.ylim:
        ylim = axes.ylim
    elif ys:
        ylim = (min(0.0, min(ys)) if min(ys) >= 0 and min(ys) < 0.2 * max(ys) else min(ys), max(ys))
    else:
        ylim = (0.0, 1.0)
    return Frame(axes, xlim, ylim)


def plot_series(series: Sequence[tuple[str, Sequence[tuple[float, float]]]], axes: Axes = Axes()) -> str:
    """Render labelled ``(x, y)`` series as a standalone SVG 1.1 document."""
    if not series:
        raise ValidationError("nothing to plot")
    for label, pts in series:
        if not pts:
            raise ValidationError(f"series {label!r} has no points")
    fr = frame_for(series, axes)
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{axes.width}" '
        f'height="{axes.height}" viewBox="0 0 {axes.width} {axes.height}">',
        f'<rect x="0" y="0" width="{axes.width}" height="{axes.height}" fill="white"/>',
    ]
    if axes.title:
        out.append(f'<text x="{_fmt(axes.width / 2)}" y="22" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="15">{escape(axes.title)}</text>')
    out.append(f'<g stroke="black" stroke-width="1" fill="none">'
               f'<line x1="{_fmt(fr.left)}" y1="{_fmt(fr.bottom)}" x2="{_fmt(fr.right)}" y2="{_fmt(fr.bottom)}"/>'
               f'<line x1="{_fmt(fr.left)}" y1="{_fmt(fr.top)}" x2="{_fmt(fr.left)}" y2="{_fmt(fr.bottom)}"/></g>')
    out.append('<g font-family="sans-serif" font-size="11" fill="black">')
    for t in nice_ticks(*fr.xlim):
        px = fr.x(t)
        out.append(f'<line x1="{_fmt(px)}" y1="{_fmt(fr.bottom)}" x2="{_fmt(px)}" y2="{_fmt(fr.bottom + 5)}" '
                   f'stroke="black"/><text x="{_fmt(px)}" y="{_fmt(fr.bottom + 18)}" '
                   f'text-anchor="middle">{_tick_label(t)}</text>')
    for t in nice_ticks(*fr.ylim):
        py = fr.y(t)
        out.append(f'<line x1="{_fmt(fr.left - 5)}" y1="{_fmt(py)}" x2="{_fmt(fr.left)}" y2="{_fmt(py)}" '
                   f'stroke="black"/><text x="{_fmt(fr.left - 8)}" y="{_fmt(py + 4)}" '
                   f'text-anchor="end">{_tick_label(t)}</text>')
    if axes.xlabel:
        out.append(f'<text x="{_fmt((fr.left + fr.right) / 2)}" y="{axes.height - 12}" '
                   f'text-anchor="middle">{escape(axes.xlabel)}</text>')
    if axes.ylabel:
        cy = (fr.top + fr.bottom) / 2
        out.append(f'<text x="16" y="{_fmt(cy)}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {_fmt(cy)})">{escape(axes.ylabel)}</text>')
    out.append("</g>")
    for v in axes.vlines:
        px = fr.x(v)
        out.append(f'<line x1="{_fmt(px)}" y1="{_fmt(fr.top)}" x2="{_fmt(px)}" y2="{_fmt(fr.bottom)}" '
                   f'stroke="#999999" stroke-dasharray="4 3"/>')
    for i, (label, pts) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_fmt(fr.x(x))},{_fmt(fr.y(y))}" for x, y in pts if math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = fr.top + 10 + 18 * i
        lx = fr.right + 12
        out.append(f'<line x1="{_fmt(lx)}" y1="{_fmt(ly)}" x2="{_fmt(lx + 20)}" y2="{_fmt(ly)}" '
                   f'stroke="{color}" stroke-width="2"/>'
                   f'<text x="{_fmt(lx + 26)}" y="{_fmt(ly + 4)}" font-family="sans-serif" '
                   f'font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
