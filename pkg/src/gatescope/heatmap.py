"""SVG heatmaps of DiffMatrix values (layers down, roles across)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

from .diff import DiffMatrix

# viridis anchor colors, evenly spaced on [0, 1]
_RAMP = (
    (0x44, 0x01, 0x54), (0x48, 0x28, 0x78), (0x3E, 0x49, 0x89), (0x31, 0x68, 0x8E),
    (0x26, 0x82, 0x8E), (0x1F, 0x9E, 0x89), (0x35, 0xB7, 0x79), (0x6D, 0xCD, 0x59),
    (0xB4, 0xDE, 0x2C), (0xFD, 0xE7, 0x25),
)

CELL_W, CELL_H = 64, 20
LEFT, TOP, GAP = 70, 56, 40
BAR_W = 16


def color_at(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    pos = t * (len(_RAMP) - 1)
    i = min(int(pos), len(_RAMP) - 2)
    f = pos - i
    rgb = [round(a + (b - a) * f) for a, b in zip(_RAMP[i], _RAMP[i + 1])]
    return "#%02x%02x%02x" % tuple(rgb)


class ColorScale:
    """Maps present values onto [0, 1]; ``log`` falls back to linear when no value is positive."""

    def __init__(self, values: np.ndarray, kind: str = "log"):
        if kind not in ("log", "linear"):
            raise ValueError(f"unknown color scale {kind!r}")
        present = values[~np.isnan(values)]
        self.vmin = float(present.min())
        self.vmax = float(present.max())
        positive = present[present > 0]
        self.kind = "log" if kind == "log" and positive.size else "linear"
        self.floor = float(positive.min()) if positive.size else 0.0

    def _f(self, v: float) -> float:
        if self.kind == "log":
            return math.log10(max(v, self.floor))
        return v

    def __call__(self, v: float) -> float:
        lo, hi = self._f(self.vmin), self._f(self.vmax)
        if hi <= lo:
            return 0.5
        return (self._f(v) - lo) / (hi - lo)


def _fmt(v: float) -> str:
    return "%.4g" % v


def _panel(dm: DiffMatrix, x0: int, y0: int, scale: ColorScale, title: str) -> list[str]:
    n_roles = len(dm.roles)
    out = [f'<g class="panel" data-statistic="{dm.statistic.value}">']
    out.append(f'<text x="{x0}" y="{y0 - 36}" font-size="13" font-weight="bold">{escape(title)}</text>')
    for j, role in enumerate(dm.roles):
        cx = x0 + j * CELL_W + CELL_W // 2
        out.append(f'<text x="{cx}" y="{y0 - 8}" font-size="11" text-anchor="middle">{role.value}</text>')
    for layer in range(dm.layers):
        cy = y0 + layer * CELL_H
        out.append(f'<text x="{x0 - 6}" y="{cy + 14}" font-size="11" text-anchor="end">L{layer}</text>')
        for j, role in enumerate(dm.roles):
            v = dm.values[layer, j]
            attrs = f'x="{x0 + j * CELL_W}" y="{cy}" width="{CELL_W}" height="{CELL_H}"'
            meta = f'data-layer="{layer}" data-role="{role.value}"'
            if math.isnan(v):
                out.append(f'<rect class="cell absent" {meta} {attrs} fill="url(#hatch)" stroke="#999"/>')
            else:
                out.append(
                    f'<rect class="cell" {meta} data-value="{float(v)!r}" {attrs} '
                    f'fill="{color_at(scale(float(v)))}"><title>L{layer} {role.value}: {_fmt(v)}</title></rect>'
                )
    # color bar
    bx = x0 + n_roles * CELL_W + 16
    bar_h = max(dm.layers * CELL_H, 60)
    grad = f"grad-{dm.statistic.value}-{x0}"
    out.append(f'<defs><linearGradient id="{grad}" x1="0" y1="1" x2="0" y2="0">')
    for k in range(len(_RAMP)):
        t = k / (len(_RAMP) - 1)
        out.append(f'<stop offset="{t:.4f}" stop-color="{color_at(t)}"/>')
    out.append("</linearGradient></defs>")
    out.append(f'<rect class="colorbar" x="{bx}" y="{y0}" width="{BAR_W}" height="{bar_h}" fill="url(#{grad})"/>')
    out.append(f'<text class="colorbar-max" x="{bx + BAR_W + 4}" y="{y0 + 10}" font-size="10">{_fmt(scale.vmax)}</text>')
    out.append(f'<text class="colorbar-min" x="{bx + BAR_W + 4}" y="{y0 + bar_h}" font-size="10">{_fmt(scale.vmin)}</text>')
    out.append(f'<text x="{bx + BAR_W + 4}" y="{y0 + bar_h // 2}" font-size="9" fill="#555">{scale.kind}</text>')
    out.append("</g>")
    return out


def panel_width(dm: DiffMatrix) -> int:
    return LEFT + len(dm.roles) * CELL_W + 16 + BAR_W + 70


def render_panels(panels: list[tuple[str, DiffMatrix]], color_scale: str = "log") -> str:
    if not panels:
        raise ValueError("nothing to render")
    for _, dm in panels:
        if dm.is_empty():
            raise ValueError("cannot render an empty diff matrix")
    width = sum(panel_width(dm) for _, dm in panels) + GAP * (len(panels) - 1)
    height = TOP + max(max(dm.layers * CELL_H, 60) for _, dm in panels) + 20
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        '<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" '
        'patternTransform="rotate(45)"><rect width="6" height="6" fill="#fff"/>'
        '<line x1="0" y1="0" x2="0" y2="6" stroke="#999" stroke-width="2"/></pattern></defs>',
    ]
    x = 0
    for title, dm in panels:
        scale = ColorScale(dm.values, color_scale)
        lines.extend(_panel(dm, x + LEFT, TOP, scale, title))
        x += panel_width(dm) + GAP
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_heatmap_svg(dm: DiffMatrix, color_scale: str = "log", title: str | None = None) -> str:
    return render_panels([(title or dm.statistic.value, dm)], color_scale)
