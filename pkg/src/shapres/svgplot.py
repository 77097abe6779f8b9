"""Minimal deterministic SVG charts (scatter, line, force bars).

Output is plain text with fixed float formatting and no timestamps or
external assets, so identical inputs give byte-identical files. Colors
come from a fixed 256-step perceptual ramp (dark violet to yellow).
"""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH = 640
HEIGHT = 480
MARGIN_L = 72
MARGIN_R = 24
MARGIN_T = 42
MARGIN_B = 56

# Anchor stops of the ramp, interpolated then quantized to 256 steps.
_RAMP_ANCHORS = (
    (0.000, (68, 1, 84)),
    (0.125, (71, 44, 122)),
    (0.250, (59, 81, 139)),
    (0.375, (44, 113, 142)),
    (0.500, (33, 144, 141)),
    (0.625, (39, 173, 129)),
    (0.750, (92, 200, 99)),
    (0.875, (170, 220, 50)),
    (1.000, (253, 231, 37)),
)

MISSING_COLOR = "#999999"
LINE_PALETTE = ("#3b528b", "#21918c", "#5ec962", "#b5367a", "#e08214", "#444444")


def ramp_color(t: float) -> str:
    """Hex color for t in [0,1], quantized to 256 levels."""
    t = min(1.0, max(0.0, float(t)))
    t = round(t * 255) / 255.0
    for (t0, c0), (t1, c1) in zip(_RAMP_ANCHORS, _RAMP_ANCHORS[1:]):
        if t <= t1:
            frac = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
            rgb = tuple(round(a + frac * (b - a)) for a, b in zip(c0, c1))
            return "#{:02x}{:02x}{:02x}".format(*rgb)
    return "#{:02x}{:02x}{:02x}".format(*_RAMP_ANCHORS[-1][1])


def _px(v: float) -> str:
    return f"{v:.2f}"


def _limits(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if lo == hi:
        pad = max(1.0, abs(lo)) * 0.5
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


class _Canvas:
    def __init__(self, title: str) -> None:
        self.parts: list[str] = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        ]
        if title:
            self.parts.append(
                f'<text x="{WIDTH // 2}" y="24" font-family="sans-serif" '
                f'font-size="15" text-anchor="middle">{escape(title)}</text>'
            )

    def add(self, fragment: str) -> None:
        self.parts.append(fragment)

    def finish(self) -> str:
        self.parts.append("</svg>")
        return "\n".join(self.parts) + "\n"


def _axes(
    canvas: _Canvas,
    xlim: tuple[float, float],
    ylim: tuple[float, float],
    xlabel: str,
    ylabel: str,
):
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = HEIGHT - MARGIN_B, MARGIN_T

    def sx(v: float) -> float:
        return x0 + (v - xlim[0]) / (xlim[1] - xlim[0]) * (x1 - x0)

    def sy(v: float) -> float:
        return y0 + (v - ylim[0]) / (ylim[1] - ylim[0]) * (y1 - y0)

    canvas.add(
        f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
        f'fill="none" stroke="#222222"/>'
    )
    for tick in np.linspace(xlim[0], xlim[1], 5):
        px = sx(float(tick))
        canvas.add(
            f'<line x1="{_px(px)}" y1="{y0}" x2="{_px(px)}" y2="{y0 + 5}" stroke="#222222"/>'
            f'<text x="{_px(px)}" y="{y0 + 18}" font-family="sans-serif" font-size="11" '
            f'text-anchor="middle">{tick:.4g}</text>'
        )
    for tick in np.linspace(ylim[0], ylim[1], 5):
        py = sy(float(tick))
        canvas.add(
            f'<line x1="{x0 - 5}" y1="{_px(py)}" x2="{x0}" y2="{_px(py)}" stroke="#222222"/>'
            f'<text x="{x0 - 8}" y="{_px(py + 4)}" font-family="sans-serif" font-size="11" '
            f'text-anchor="end">{tick:.4g}</text>'
        )
    canvas.add(
        f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 14}" font-family="sans-serif" '
        f'font-size="13" text-anchor="middle">{escape(xlabel)}</text>'
    )
    canvas.add(
        f'<text x="18" y="{(y0 + y1) // 2}" font-family="sans-serif" font-size="13" '
        f'text-anchor="middle" transform="rotate(-90 18 {(y0 + y1) // 2})">'
        f"{escape(ylabel)}</text>"
    )
    return sx, sy


def _point_colors(color_values: Sequence[float] | None, count: int) -> list[str]:
    if color_values is None:
        return [MISSING_COLOR] * count
    arr = np.array([np.nan if v is None else float(v) for v in color_values])
    finite = arr[np.isfinite(arr)]
    if finite.size == 0:
        return [MISSING_COLOR] * count
    lo, hi = float(finite.min()), float(finite.max())
    span = hi - lo
    out = []
    for v in arr:
        if not np.isfinite(v):
            out.append(MISSING_COLOR)
        elif span == 0.0:
            out.append(ramp_color(0.5))
        else:
            out.append(ramp_color((v - lo) / span))
    return out


def scatter_svg(
    xs: Sequence[float],
    ys: Sequence[float],
    color_values: Sequence[float] | None,
    xlabel: str,
    ylabel: str,
    title: str = "",
) -> str:
    """Scatter plot; points colored by the ramp over color_values."""
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    if len(xs) != len(ys):
        raise ValueError("xs and ys lengths differ")
    canvas = _Canvas(title)
    sx, sy = _axes(canvas, _limits(xs), _limits(ys), xlabel, ylabel)
    for x, y, color in zip(xs, ys, _point_colors(color_values, len(xs))):
        canvas.add(
            f'<circle cx="{_px(sx(x))}" cy="{_px(sy(y))}" r="3" fill="{color}" '
            f'fill-opacity="0.8"/>'
        )
    return canvas.finish()


def line_svg(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    xlabel: str,
    ylabel: str,
    title: str = "",
) -> str:
    """Line chart of (name, xs, ys) series with a fixed palette and legend."""
    if not series:
        raise ValueError("need at least one series")
    all_x = [float(v) for _, xs, _ in series for v in xs]
    all_y = [float(v) for _, _, ys in series for v in ys]
    canvas = _Canvas(title)
    sx, sy = _axes(canvas, _limits(all_x), _limits(all_y), xlabel, ylabel)
    for k, (name, xs, ys) in enumerate(series):
        color = LINE_PALETTE[k % len(LINE_PALETTE)]
        pts = " ".join(f"{_px(sx(float(x)))},{_px(sy(float(y)))}" for x, y in zip(xs, ys))
        canvas.add(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>'
        )
        ly = MARGIN_T + 14 + 16 * k
        canvas.add(
            f'<line x1="{WIDTH - MARGIN_R - 130}" y1="{ly}" x2="{WIDTH - MARGIN_R - 106}" '
            f'y2="{ly}" stroke="{color}" stroke-width="1.8"/>'
            f'<text x="{WIDTH - MARGIN_R - 100}" y="{ly + 4}" font-family="sans-serif" '
            f'font-size="11">{escape(name)}</text>'
        )
    return canvas.finish()


def force_svg(force, title: str = "") -> str:
    """Stacked horizontal bar of one residual's decomposition.

    Renders ForceData: each segment spans the previous cumulative sum to
    its own, colored by the ramp over segment color keys; markers at the
    zero base and the final residual.
    """
    cums = [0.0] + [s.cumulative for s in force.segments]
    lo = min(min(cums), float(force.final), 0.0)
    hi = max(max(cums), float(force.final), 0.0)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pad = (hi - lo) * 0.05
    lo, hi = lo - pad, hi + pad
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R

    def sx(v: float) -> float:
        return x0 + (v - lo) / (hi - lo) * (x1 - x0)

    canvas = _Canvas(title)
    band_y = HEIGHT // 2 - 30
    band_h = 60
    colors = _point_colors([s.color_key for s in force.segments], len(force.segments))
    prev = 0.0
    for segment, color in zip(force.segments, colors):
        a, b = sx(prev), sx(segment.cumulative)
        left, width = (a, b - a) if b >= a else (b, a - b)
        canvas.add(
            f'<rect x="{_px(left)}" y="{band_y}" width="{_px(max(width, 0.75))}" '
            f'height="{band_h}" fill="{color}" stroke="#ffffff" stroke-width="0.5">'
            f"<title>{escape(segment.train_id)}: {segment.value:.6g}</title></rect>"
        )
        prev = segment.cumulative
    zero_x = _px(sx(0.0))
    final_x = _px(sx(float(force.final)))
    canvas.add(
        f'<line x1="{zero_x}" y1="{band_y - 18}" x2="{zero_x}" y2="{band_y + band_h + 18}" '
        f'stroke="#222222" stroke-dasharray="4 3"/>'
        f'<text x="{zero_x}" y="{band_y - 24}" font-family="sans-serif" font-size="11" '
        f'text-anchor="middle">base 0</text>'
    )
    canvas.add(
        f'<line x1="{final_x}" y1="{band_y - 18}" x2="{final_x}" y2="{band_y + band_h + 18}" '
        f'stroke="#b5367a"/>'
        f'<text x="{final_x}" y="{band_y + band_h + 32}" font-family="sans-serif" '
        f'font-size="11" text-anchor="middle">e = {float(force.final):.6g}</text>'
    )
    axis_y = band_y + band_h + 44
    canvas.add(f'<line x1="{x0}" y1="{axis_y}" x2="{x1}" y2="{axis_y}" stroke="#222222"/>')
    for tick in np.linspace(lo, hi, 5):
        px = sx(float(tick))
        canvas.add(
            f'<line x1="{_px(px)}" y1="{axis_y}" x2="{_px(px)}" y2="{axis_y + 5}" '
            f'stroke="#222222"/>'
            f'<text x="{_px(px)}" y="{axis_y + 18}" font-family="sans-serif" font-size="11" '
            f'text-anchor="middle">{tick:.4g}</text>'
        )
    return canvas.finish()
