"""Dependency-free SVG scatter panels for point and trajectory CSVs."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

PANEL = 220
PAD = 12


def read_plot_csv(path: str | Path) -> list[tuple[str, np.ndarray]]:
    """Return ``[(title, points)]``: one panel per step for trajectory files."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        rows = list(reader)
    if "t" in fields:
        steps: dict[int, list] = {}
        for r in rows:
            steps.setdefault(int(r["t"]), []).append((float(r["x"]), float(r["y"])))
        return [(f"t={k}", np.array(steps[k]).reshape(-1, 2)) for k in sorted(steps)]
    pts = np.array([(float(r["x"]), float(r["y"])) for r in rows]).reshape(-1, 2)
    return [("", pts)]


def render_svg(panels: list[tuple[str, np.ndarray]]) -> str:
    allpts = np.concatenate([p for _, p in panels]) if panels else np.zeros((0, 2))
    if len(allpts):
        lo, hi = allpts.min(axis=0), allpts.max(axis=0)
        span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
        mid = (lo + hi) / 2
    else:
        span, mid = 2.0, np.zeros(2)
    half = 0.55 * span
    inner = PANEL - 2 * PAD
    width = PANEL * max(len(panels), 1)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL + 20}" '
        f'viewBox="0 0 {width} {PANEL + 20}">',
        '<rect x="0" y="0" width="100%" height="100%" fill="white"/>',
    ]
    for k, (title, pts) in enumerate(panels or [("", np.zeros((0, 2)))]):
        x0 = k * PANEL + PAD
        out.append(f'<g class="panel"><rect x="{x0}" y="{PAD}" width="{inner}" height="{inner}" fill="none" stroke="#444"/>')
        cx = x0 + inner / 2
        cy = PAD + inner / 2
        out.append(f'<line x1="{x0}" y1="{cy}" x2="{x0 + inner}" y2="{cy}" stroke="#ccc"/>')
        out.append(f'<line x1="{cx}" y1="{PAD}" x2="{cx}" y2="{PAD + inner}" stroke="#ccc"/>')
        if title:
            out.append(f'<text x="{cx}" y="{PANEL + 12}" font-size="12" text-anchor="middle">{title}</text>')
        for px, py in pts:
            sx = cx + (px - mid[0]) / half * inner / 2
            sy = cy - (py - mid[1]) / half * inner / 2
            out.append(f'<circle cx="{sx:.2f}" cy="{sy:.2f}" r="1.2" fill="#1f77b4" fill-opacity="0.5"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(path: str | Path, out: str | Path) -> int:
    """Render ``path`` to ``out``; returns the number of panels."""
    panels = read_plot_csv(path)
    Path(out).write_text(render_svg(panels))
    return max(len(panels), 1)
