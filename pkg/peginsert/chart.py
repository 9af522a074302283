"""Depth and force charts for a logged episode.

Renders an SVG with two stacked panels (EEF height with the safety lock's
contact limit, and normalized F_z) and a plain-text summary with a coarse
character plot for terminals.
"""

import logging
import math
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from lxml import etree

# Set up logging
logger = logging.getLogger(__name__)

SVG_NAMESPACE = "http://www.w3.org/2000/svg"
SVG_NS = "{%s}" % SVG_NAMESPACE

MM_PER_M = 1000.0

WIDTH = 640.0
PANEL_HEIGHT = 220.0
MARGIN = 48.0

COLORS = {"depth": "#1f77b4", "limit": "#d62728", "force": "#2ca02c", "axis": "#444444"}


def _series(rows: Sequence[Dict], column: str, scale: float = 1.0) -> np.ndarray:
    return np.array([float(row[column]) * scale for row in rows])


class _Panel:
    """Maps data coordinates to one panel's pixel box."""

    def __init__(self, top: float, x_range: Tuple[float, float], y_values: Sequence[np.ndarray]):
        self.top = top
        self.x_min, self.x_max = x_range
        finite = np.concatenate([v[np.isfinite(v)] for v in y_values if len(v)])
        low = float(finite.min()) if finite.size else 0.0
        high = float(finite.max()) if finite.size else 1.0
        if high - low < 1e-9:
            low, high = low - 0.5, high + 0.5
        pad = 0.05 * (high - low)
        self.y_min, self.y_max = low - pad, high + pad

    def x(self, value: float) -> float:
        span = max(self.x_max - self.x_min, 1.0)
        return MARGIN + (value - self.x_min) / span * (WIDTH - 2 * MARGIN)

    def y(self, value: float) -> float:
        inner = PANEL_HEIGHT - MARGIN
        return self.top + MARGIN / 2 + (self.y_max - value) / (self.y_max - self.y_min) * inner


def _polyline(parent, panel: _Panel, steps: np.ndarray, values: np.ndarray, color: str, dashed=False):
    """Add one line per finite run of values."""
    runs: List[List[str]] = [[]]
    for step, value in zip(steps, values):
        if math.isfinite(value):
            runs[-1].append(f"{panel.x(step):.2f},{panel.y(value):.2f}")
        elif runs[-1]:
            runs.append([])
    for points in runs:
        if len(points) < 2:
            continue
        line = etree.SubElement(parent, SVG_NS + "polyline")
        line.set("points", " ".join(points))
        line.set("fill", "none")
        line.set("stroke", color)
        line.set("stroke-width", "1.5")
        if dashed:
            line.set("stroke-dasharray", "4 3")


def _text(parent, x: float, y: float, content: str, anchor: str = "start", size: int = 11):
    node = etree.SubElement(parent, SVG_NS + "text")
    node.set("x", f"{x:.2f}")
    node.set("y", f"{y:.2f}")
    node.set("font-family", "sans-serif")
    node.set("font-size", str(size))
    node.set("text-anchor", anchor)
    node.text = content
    return node


def _axes(parent, panel: _Panel, title: str, unit: str) -> None:
    left, right = MARGIN, WIDTH - MARGIN
    bottom = panel.y(panel.y_min)
    top = panel.y(panel.y_max)
    frame = etree.SubElement(parent, SVG_NS + "rect")
    frame.set("x", f"{left:.2f}")
    frame.set("y", f"{top:.2f}")
    frame.set("width", f"{right - left:.2f}")
    frame.set("height", f"{bottom - top:.2f}")
    frame.set("fill", "none")
    frame.set("stroke", COLORS["axis"])
    _text(parent, left, top - 6, title, size=12)
    _text(parent, left - 4, top + 10, f"{panel.y_max:.2f}", anchor="end", size=9)
    _text(parent, left - 4, bottom, f"{panel.y_min:.2f}", anchor="end", size=9)
    _text(parent, right, top - 6, unit, anchor="end", size=9)
    _text(parent, left, bottom + 14, f"{panel.x_min:.0f}", size=9)
    _text(parent, right, bottom + 14, f"step {panel.x_max:.0f}", anchor="end", size=9)


def render_svg(rows: Sequence[Dict], title: str = "") -> etree._Element:
    """Build the two-panel chart for trajectory rows.

    Args:
        rows: Parsed trajectory rows, reset row first
        title: Caption drawn above the panels

    Returns:
        The <svg> root element
    """
    steps = _series(rows, "step")
    depth = _series(rows, "p_ee_z")
    limit = _series(rows, "dsl_z_c", MM_PER_M)
    force = _series(rows, "wrench_norm_fz")
    x_range = (float(steps.min()), float(steps.max())) if len(steps) else (0.0, 1.0)

    height = 2 * PANEL_HEIGHT + MARGIN
    root = etree.Element(SVG_NS + "svg", nsmap={None: SVG_NAMESPACE})
    root.set("width", f"{WIDTH:.0f}")
    root.set("height", f"{height:.0f}")
    root.set("viewBox", f"0 0 {WIDTH:.0f} {height:.0f}")
    if title:
        _text(root, WIDTH / 2, 18, title, anchor="middle", size=13)

    depth_panel = _Panel(MARGIN / 2, x_range, [depth, limit])
    group = etree.SubElement(root, SVG_NS + "g", id="depth")
    _axes(group, depth_panel, "EEF height and contact limit", "mm")
    _polyline(group, depth_panel, steps, depth, COLORS["depth"])
    _polyline(group, depth_panel, steps, limit, COLORS["limit"], dashed=True)

    force_panel = _Panel(MARGIN / 2 + PANEL_HEIGHT + MARGIN / 2, x_range, [force])
    group = etree.SubElement(root, SVG_NS + "g", id="force")
    _axes(group, force_panel, "Normalized F_z", "1")
    _polyline(group, force_panel, steps, force, COLORS["force"])
    return root


def write_svg(rows: Sequence[Dict], path: Union[str, Path], title: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tree = etree.ElementTree(render_svg(rows, title))
    tree.write(str(path), pretty_print=True, xml_declaration=True, encoding="utf-8")
    logger.info(f"Wrote chart to {path}")
    return path


def text_plot(values: Sequence[float], height: int = 8, width: int = 60) -> List[str]:
    """Coarse character plot; NaN values are left blank."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return []
    columns = np.array_split(np.arange(values.size), min(width, values.size))
    sampled = np.array([values[c].mean() if np.isfinite(values[c]).all() else np.nan for c in columns])
    finite = sampled[np.isfinite(sampled)]
    if finite.size == 0:
        return [" " * len(sampled)] * height
    low, high = float(finite.min()), float(finite.max())
    span = high - low if high > low else 1.0
    grid = [[" "] * len(sampled) for _ in range(height)]
    for i, value in enumerate(sampled):
        if math.isfinite(value):
            level = int(round((value - low) / span * (height - 1)))
            grid[height - 1 - level][i] = "*"
    lines = ["".join(row) for row in grid]
    lines[0] = f"{lines[0]}  {high:.3f}"
    lines[-1] = f"{lines[-1]}  {low:.3f}"
    return lines


def text_summary(rows: Sequence[Dict], divergences: Optional[int] = None) -> str:
    """Plain-text summary of an episode log."""
    if not rows:
        return "Empty trajectory"
    last = rows[-1]
    depth = _series(rows, "p_ee_z")
    force = _series(rows, "wrench_norm_fz")
    rewards = _series(rows[1:], "reward")
    branches = Counter(str(row["dsl_branch"]) for row in rows if row["dsl_branch"])

    lines = [
        f"Steps:           {int(last['step'])}",
        f"Success:         {'yes' if int(last['success']) else 'no'}",
        f"Final height:    {depth[-1]:.3f} mm (surface {float(last['p_h_true_z']):.3f} mm)",
        f"Return:          {rewards.sum():.6f}",
        f"Peak F_z (norm): {np.nanmax(force):.4f}",
    ]
    if branches:
        lines.append(
            "Limit branches:  " + ", ".join(f"{name} {count}" for name, count in sorted(branches.items()))
        )
    if divergences is not None:
        lines.append(f"Divergences:     {divergences}")
    lines.append("")
    lines.append("Height (mm) vs step")
    lines.extend(text_plot(depth))
    lines.append("")
    lines.append("Normalized F_z vs step")
    lines.extend(text_plot(force))
    return "\n".join(lines)
