"""Minimal SVG 1.1 rendering of cells, sets and trajectories (first two state coordinates)."""

from __future__ import annotations

import numpy as np

from symctl.geometry import Ellipsoid, Hyperrectangle

WIDTH = 640


class Canvas:
    def __init__(self, bounds: Hyperrectangle, width=WIDTH):
        self.lo = bounds.lower[:2]
        self.hi = bounds.upper[:2]
        span = self.hi - self.lo
        self.scale = width / span[0]
        self.width = width
        self.height = span[1] * self.scale
        self.items = []

    def _pt(self, x):
        return (x[0] - self.lo[0]) * self.scale, (self.hi[1] - x[1]) * self.scale

    def shape(self, s, fill="none", stroke="black", opacity=1.0, width=1.0):
        style = f'fill="{fill}" fill-opacity="{opacity:.3f}" stroke="{stroke}" stroke-width="{width:g}"'
        if isinstance(s, Hyperrectangle):
            x0, y0 = self._pt([s.lower[0], s.upper[1]])
            w, h = 2 * s.half_lengths[:2] * self.scale
            self.items.append(f'<rect x="{x0:.3f}" y="{y0:.3f}" width="{w:.3f}" height="{h:.3f}" {style}/>')
            return
        P = s.inverse_shape[:2, :2]  # projection of the ellipsoid onto the first two axes
        vals, vecs = np.linalg.eigh(P)
        rx, ry = np.sqrt(np.maximum(vals, 0)) * self.scale
        angle = -np.degrees(np.arctan2(vecs[1, 0], vecs[0, 0]))
        cx, cy = self._pt(s.center)
        self.items.append(f'<ellipse cx="{cx:.3f}" cy="{cy:.3f}" rx="{rx:.3f}" ry="{ry:.3f}" '
                          f'transform="rotate({angle:.3f} {cx:.3f} {cy:.3f})" {style}/>')

    def polyline(self, pts, stroke="black", width=1.0):
        coords = " ".join("{:.3f},{:.3f}".format(*self._pt(p)) for p in pts)
        self.items.append(f'<polyline points="{coords}" fill="none" stroke="{stroke}" stroke-width="{width:g}"/>')

    def svg(self):
        head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
                f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{self.width:.0f}" '
                f'height="{self.height:.0f}" viewBox="0 0 {self.width:.3f} {self.height:.3f}">\n')
        return head + "\n".join(self.items) + "\n</svg>\n"


def value_color(v, vmax):
    """Blue (cheap) to yellow (expensive); gray when infinite."""
    if not np.isfinite(v):
        return "#dddddd"
    t = 0.0 if vmax <= 0 else min(1.0, v / vmax)
    r, g, b = int(40 + 215 * t), int(60 + 170 * t), int(200 - 160 * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def render_run(bounds, cells, values, sets, trajectories, max_cells=20000):
    canvas = Canvas(bounds)
    finite = values[np.isfinite(values)]
    vmax = float(finite.max()) if len(finite) else 1.0
    for i, cell in enumerate(cells[:max_cells]):
        if np.isfinite(values[i]):
            canvas.shape(cell, fill=value_color(values[i], vmax), stroke="none", opacity=0.8)
        elif isinstance(cell, Ellipsoid):
            canvas.shape(cell, stroke="#999999", width=0.5)
    colors = {"initial": "#2a9d2a", "target": "#d4a017", "obstacle": "#c0392b", "safe": "#2a6fd4"}
    for name, s in sets:
        canvas.shape(s, stroke=colors.get(name, "black"), width=2.0)
    for traj in trajectories:
        if len(traj) > 1:
            canvas.polyline(traj, stroke="black", width=1.5)
    return canvas.svg()
