"""Phase ribbon rendering: one SVG with ground-truth and predicted bars.

Each bar is a row of run-length rectangles over the frame axis. Colors
are a pure function of the phase id, so ribbons from different runs and
videos stay comparable side by side.
"""

from __future__ import annotations

import colorsys
import html

import numpy as np

from .metrics import run_lengths

_GOLDEN = 0.6180339887498949


def phase_color(phase_id: int) -> str:
    """Deterministic hex color for a phase id (golden-angle hue walk)."""
    h = (0.12 + phase_id * _GOLDEN) % 1.0
    r, g, b = colorsys.hls_to_rgb(h, 0.55, 0.72)
    return f"#{round(r * 255):02x}{round(g * 255):02x}{round(b * 255):02x}"


def _bar(seq, y, height, width, total_frames):
    parts = []
    for label, start, length in run_lengths(seq):
        x = start / total_frames * width
        w = length / total_frames * width
        parts.append(
            f'<rect x="{x:.2f}" y="{y}" width="{w:.2f}" height="{height}" '
            f'fill="{phase_color(label)}"><title>phase {label}: frames '
            f"{start}..{start + length - 1}</title></rect>"
        )
    return parts


def render_ribbon(predictions, labels=None, video_id="", width=960):
    """SVG string showing predicted (and optionally true) phases over time."""
    preds = np.asarray(predictions, dtype=np.int64)
    if preds.size == 0:
        raise ValueError("render_ribbon: empty predictions")
    n = preds.size
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != preds.shape:
            raise ValueError(
                f"render_ribbon: labels {labels.shape} vs predictions {preds.shape}"
            )
    bar_h, gap, label_w = 34, 10, 52
    top = 28
    rows = [("pred", preds)] if labels is None else [("true", labels), ("pred", preds)]
    height = top + len(rows) * (bar_h + gap) + 34
    plot_w = width - label_w - 12
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" font-family="monospace" font-size="12">',
        f'<text x="{label_w}" y="16">{html.escape(str(video_id))} '
        f"({n} frames)</text>",
    ]
    y = top
    for name, seq in rows:
        parts.append(f'<text x="4" y="{y + bar_h / 2 + 4}">{name}</text>')
        parts.append(f'<g class="bar bar-{name}" transform="translate({label_w},0)">')
        parts.extend(_bar(seq, y, bar_h, plot_w, n))
        parts.append("</g>")
        y += bar_h + gap
    # frame axis ticks at quarters
    axis_y = y + 12
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        x = label_w + frac * plot_w
        parts.append(
            f'<text x="{x:.2f}" y="{axis_y}" text-anchor="middle">'
            f"{int(round(frac * (n - 1)))}</text>"
        )
    phases = sorted(set(np.concatenate([seq for _, seq in rows]).tolist()))
    parts.append('<g class="legend">')
    lx = label_w
    ly = axis_y + 16
    for p in phases:
        parts.append(
            f'<rect x="{lx}" y="{ly - 10}" width="12" height="12" '
            f'fill="{phase_color(p)}"/>'
            f'<text x="{lx + 16}" y="{ly}">phase {p}</text>'
        )
        lx += 90
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts)
