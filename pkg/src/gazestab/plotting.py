"""Static SVG figures written by hand so the bytes depend only on the input."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .core import GazeError

WIDTH = HEIGHT = 420
MARGIN = 48


def _num(v: float) -> str:
    text = f"{v:.2f}"
    return "0.00" if text == "-0.00" else text


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{escape(title)}</text>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" '
        f'height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="black"/>',
    ]


def _label(x: float, y: float, text: str, anchor: str = "middle") -> str:
    return (f'<text x="{_num(x)}" y="{_num(y)}" text-anchor="{anchor}" font-family="sans-serif" '
            f'font-size="10">{escape(text)}</text>')


class _Frame:
    """Maps data coordinates to the square plot area (y pointing up)."""

    def __init__(self, points: np.ndarray):
        lo, hi = points.min(axis=0), points.max(axis=0)
        centre = (lo + hi) / 2
        half = max(float((hi - lo).max()) / 2 * 1.1, 1e-3)
        self.lo = centre - half
        self.span = 2 * half
        self.size = WIDTH - 2 * MARGIN

    def __call__(self, p) -> tuple[float, float]:
        u = (np.asarray(p, dtype=np.float64) - self.lo) / self.span
        return MARGIN + u[0] * self.size, HEIGHT - MARGIN - u[1] * self.size


def scatter_svg(raw, target, pred=None, title: str = "fixation") -> str:
    """Raw fixation points (circles), optional predictions (squares), target (cross)."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, 2)
    if raw.shape[0] == 0:
        raise GazeError("nothing to plot: no raw points")
    pred = None if pred is None else np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(target, dtype=np.float64)
    pts = [raw, g[None]] + ([pred] if pred is not None and len(pred) else [])
    frame = _Frame(np.concatenate(pts))

    out = _header(title)
    for p in raw:
        x, y = frame(p)
        out.append(f'<circle class="raw" cx="{_num(x)}" cy="{_num(y)}" r="2.5" '
                   f'fill="none" stroke="#1f77b4"/>')
    if pred is not None:
        for p in pred:
            x, y = frame(p)
            out.append(f'<rect class="pred" x="{_num(x - 2)}" y="{_num(y - 2)}" width="4" '
                       f'height="4" fill="#d62728"/>')
    x, y = frame(g)
    out.append(f'<path class="target" d="M{_num(x - 7)} {_num(y)} L{_num(x + 7)} {_num(y)} '
               f'M{_num(x)} {_num(y - 7)} L{_num(x)} {_num(y + 7)}" stroke="black" stroke-width="2"/>')

    left, bottom = frame.lo
    top = bottom + frame.span
    right = left + frame.span
    out.append(_label(MARGIN, HEIGHT - MARGIN + 14, f"{left:.3f}", "start"))
    out.append(_label(WIDTH - MARGIN, HEIGHT - MARGIN + 14, f"{right:.3f}", "end"))
    out.append(_label(MARGIN - 4, HEIGHT - MARGIN, f"{bottom:.3f}", "end"))
    out.append(_label(MARGIN - 4, MARGIN + 8, f"{top:.3f}", "end"))
    legend = "raw (circles)" + ("  predicted (squares)" if pred is not None else "") + "  target (cross)"
    out.append(_label(WIDTH // 2, HEIGHT - 12, legend))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def histogram_svg(values: Sequence[float], label: str = "value", bins: int = 20) -> str:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise GazeError(f"nothing to plot: no finite {label} values")
    if bins < 1:
        raise GazeError("bins must be >= 1")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    size = WIDTH - 2 * MARGIN
    bar_w = size / bins
    peak = counts.max()

    out = _header(f"{label} (n={v.size})")
    for i, c in enumerate(counts):
        h = size * c / peak
        out.append(f'<rect class="bar" x="{_num(MARGIN + i * bar_w)}" y="{_num(HEIGHT - MARGIN - h)}" '
                   f'width="{_num(bar_w)}" height="{_num(h)}" fill="#7f7f7f" stroke="white"/>')
    out.append(_label(MARGIN, HEIGHT - MARGIN + 14, f"{edges[0]:.4g}", "start"))
    out.append(_label(WIDTH - MARGIN, HEIGHT - MARGIN + 14, f"{edges[-1]:.4g}", "end"))
    out.append(_label(MARGIN - 4, MARGIN + 8, str(int(peak)), "end"))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_values(report: dict, metric: str) -> list[float]:
    """Per-trial values of ``metric`` from a report dictionary (see MetricsReport.to_dict)."""
    rows = report.get("per_trial") or []
    if not rows:
        raise GazeError("report has no per-trial entries")
    if metric not in rows[0]:
        raise GazeError(f"unknown metric {metric!r}; available: {sorted(rows[0])}")
    return [float(r[metric]) for r in rows]


def write_svg(path: str | Path, svg: str) -> None:
    Path(path).write_text(svg, encoding="utf-8")
