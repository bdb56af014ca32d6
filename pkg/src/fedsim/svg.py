"""Native SVG curve rendering (no external plotting dependency).

Follows the figure convention used throughout the experiment reports:
attack success rate as solid lines, clean accuracy as dashed lines.
"""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#7f7f7f")


@dataclass
class Series:
    label: str
    xs: list[float]
    ys: list[float]
    dashed: bool = False
    color: str | None = None


def render_curves(series: list[Series], title: str = "",
                  width: int = 720, height: int = 440,
                  x_label: str = "round", y_label: str = "rate") -> str:
    """Render line series into a standalone SVG document.

    Each series becomes one ``<polyline class="series">`` so callers (and
    tests) can count them.
    """
    left, right, top, bottom = 60, 160, 40, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    xs_all = [x for s in series for x in s.xs]
    ys_all = [y for s in series for y in s.ys]
    x_min, x_max = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    if x_min == x_max:
        x_max = x_min + 1.0
    y_min = min(0.0, min(ys_all)) if ys_all else 0.0
    y_max = max(1.0, max(ys_all)) if ys_all else 1.0

    def px(x: float) -> float:
        return left + (x - x_min) / (x_max - x_min) * plot_w

    def py(y: float) -> float:
        return top + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
                     f'font-size="16">{escape(title)}</text>')
    # axes and ticks
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" '
                 f'stroke="black"/>')
    parts.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
                 f'y2="{top + plot_h}" stroke="black"/>')
    for i in range(5):
        fy = y_min + (y_max - y_min) * i / 4
        fx = x_min + (x_max - x_min) * i / 4
        parts.append(f'<text x="{left - 8}" y="{py(fy) + 4:.1f}" text-anchor="end" '
                     f'font-size="11">{fy:.2f}</text>')
        parts.append(f'<line x1="{left}" y1="{py(fy):.1f}" x2="{left + plot_w}" '
                     f'y2="{py(fy):.1f}" stroke="#dddddd"/>')
        parts.append(f'<text x="{px(fx):.1f}" y="{top + plot_h + 18}" '
                     f'text-anchor="middle" font-size="11">{fx:.0f}</text>')
    parts.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 12}" '
                 f'text-anchor="middle" font-size="12">{escape(x_label)}</text>')
    parts.append(f'<text x="18" y="{top + plot_h / 2:.1f}" text-anchor="middle" '
                 f'font-size="12" transform="rotate(-90 18 {top + plot_h / 2:.1f})">'
                 f'{escape(y_label)}</text>')

    for i, s in enumerate(series):
        color = s.color or _PALETTE[i % len(_PALETTE)]
        dash = ' stroke-dasharray="7,4"' if s.dashed else ""
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(s.xs, s.ys))
        parts.append(f'<polyline class="series" fill="none" stroke="{color}" '
                     f'stroke-width="1.8"{dash} points="{points}"/>')
        ly = top + 16 + 18 * i
        lx = left + plot_w + 14
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 26}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="1.8"{dash}/>')
        parts.append(f'<text x="{lx + 32}" y="{ly}" font-size="11">'
                     f'{escape(s.label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
