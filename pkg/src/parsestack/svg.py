"""Minimal deterministic SVG charts (grouped bars and polylines), no plotting dependency."""

from __future__ import annotations

import math
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

COLORS = ("#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948")
_W, _H = 640, 360
_LEFT, _RIGHT, _TOP, _BOTTOM = 56, 180, 30, 40


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _frame(title: str, y_lo: float, y_hi: float, ticks: int = 5) -> list[str]:
    plot_h = _H - _TOP - _BOTTOM
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    for i in range(ticks + 1):
        v = y_lo + (y_hi - y_lo) * i / ticks
        y = _TOP + plot_h * (1 - i / ticks)
        out.append(f'<line x1="{_LEFT}" x2="{_W - _RIGHT}" y1="{_fmt(y)}" y2="{_fmt(y)}" stroke="#ddd"/>')
        out.append(f'<text x="{_LEFT - 6}" y="{_fmt(y + 4)}" text-anchor="end">{v:.3g}</text>')
    return out


def _legend(names: Sequence[str]) -> list[str]:
    out = []
    for i, name in enumerate(names):
        y = _TOP + 16 * i
        out.append(f'<rect x="{_W - _RIGHT + 12}" y="{y}" width="10" height="10" fill="{COLORS[i % len(COLORS)]}"/>')
        out.append(f'<text x="{_W - _RIGHT + 28}" y="{y + 9}">{escape(name)}</text>')
    return out


def _y(v: float, lo: float, hi: float) -> float:
    plot_h = _H - _TOP - _BOTTOM
    return _TOP + plot_h * (1 - (v - lo) / (hi - lo))


def bar_chart(title: str, groups: Sequence[str], series: Mapping[str, Sequence[float]], y_max: float = 1.0) -> str:
    """One cluster per entry of ``groups``, one coloured bar per series within it."""
    names = list(series)
    plot_w = _W - _LEFT - _RIGHT
    slot = plot_w / max(len(groups), 1)
    bar = slot * 0.8 / max(len(names), 1)
    out = _frame(title, 0.0, y_max)
    for g, label in enumerate(groups):
        x0 = _LEFT + g * slot + slot * 0.1
        for s, name in enumerate(names):
            v = series[name][g]
            if not math.isfinite(v):
                continue
            top = _y(min(max(v, 0.0), y_max), 0.0, y_max)
            out.append(
                f'<rect x="{_fmt(x0 + s * bar)}" y="{_fmt(top)}" width="{_fmt(bar * 0.9)}" '
                f'height="{_fmt(_H - _BOTTOM - top)}" fill="{COLORS[s % len(COLORS)]}"/>'
            )
        out.append(f'<text x="{_fmt(x0 + slot * 0.4)}" y="{_H - _BOTTOM + 16}" text-anchor="middle">{escape(label)}</text>')
    out += _legend(names)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_chart(title: str, series: Mapping[str, Sequence[float]]) -> str:
    """Polylines against their index; the y range covers every finite value."""
    vals = [v for ys in series.values() for v in ys if math.isfinite(v)]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    n = max((len(ys) for ys in series.values()), default=1)
    plot_w = _W - _LEFT - _RIGHT
    out = _frame(title, lo, hi)
    for s, (name, ys) in enumerate(series.items()):
        pts = [
            f"{_fmt(_LEFT + plot_w * i / max(n - 1, 1))},{_fmt(_y(v, lo, hi))}"
            for i, v in enumerate(ys)
            if math.isfinite(v)
        ]
        out.append(f'<polyline fill="none" stroke="{COLORS[s % len(COLORS)]}" stroke-width="1.5" points="{" ".join(pts)}"/>')
    out += _legend(list(series))
    out.append("</svg>")
    return "\n".join(out) + "\n"
