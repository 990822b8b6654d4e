"""Grouped bar charts of the collision report: a byte-deterministic SVG
writer (fixed canvas, fixed ordering, no timestamps) plus an optional
matplotlib PNG rendering of the same figure."""

from __future__ import annotations

import math

CATEGORIES = ("front", "side", "rear")
_FILL = {"front": "#4878cf", "side": "#ee854a", "rear": "#6acc65"}

_CANVAS_W = 720
_CANVAS_H = 420
_MARGIN_L = 70
_MARGIN_R = 24
_MARGIN_T = 48
_MARGIN_B = 72


def _nice_ceiling(vmax: float) -> float:
    """Smallest 1/2/5 * 10^k value at or above vmax (1.0 when vmax <= 0)."""
    if vmax <= 0:
        return 1.0
    exp = math.floor(math.log10(vmax))
    base = 10.0 ** exp
    for mult in (1.0, 2.0, 5.0, 10.0):
        if vmax <= mult * base * (1 + 1e-12):
            return mult * base
    return 10.0 * base


def render_report_svg(rows: list[dict]) -> str:
    """Render report rows (dicts with model and *_10k rates) to an SVG string.
    One bar group per model (input order), one bar per category."""
    plot_w = _CANVAS_W - _MARGIN_L - _MARGIN_R
    plot_h = _CANVAS_H - _MARGIN_T - _MARGIN_B
    base_y = _MARGIN_T + plot_h
    ymax = _nice_ceiling(max((row[f"{c}_10k"] for row in rows for c in CATEGORIES), default=0.0))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_CANVAS_W}" height="{_CANVAS_H}" '
        f'viewBox="0 0 {_CANVAS_W} {_CANVAS_H}">',
        f'<rect x="0" y="0" width="{_CANVAS_W}" height="{_CANVAS_H}" fill="#ffffff"/>',
        f'<text x="{_CANVAS_W / 2:.2f}" y="26" text-anchor="middle" font-family="sans-serif" '
        f'font-size="16">Collisions per 10,000 frames</text>',
    ]
    # y axis with 5 ticks
    for i in range(6):
        frac = i / 5.0
        y = base_y - frac * plot_h
        label = f"{ymax * frac:.6g}"
        parts.append(f'<line x1="{_MARGIN_L}" y1="{y:.2f}" x2="{_CANVAS_W - _MARGIN_R}" y2="{y:.2f}" '
                     f'stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{_MARGIN_L - 8}" y="{y + 4:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{label}</text>')

    n_groups = len(rows)
    group_w = plot_w / max(n_groups, 1)
    bar_w = group_w / (len(CATEGORIES) + 1)
    for gi, row in enumerate(rows):
        gx = _MARGIN_L + gi * group_w
        for ci, cat in enumerate(CATEGORIES):
            value = float(row[f"{cat}_10k"])
            h = 0.0 if ymax <= 0 else value / ymax * plot_h
            x = gx + bar_w * (ci + 0.5)
            y = base_y - h
            parts.append(
                f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w:.2f}" height="{h:.2f}" '
                f'fill="{_FILL[cat]}" data-model="{row["model"]}" data-category="{cat}" '
                f'data-value="{value:.9g}"/>')
        parts.append(f'<text x="{gx + group_w / 2:.2f}" y="{base_y + 18:.2f}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="12">{row["model"]}</text>')

    # legend
    lx = _MARGIN_L
    ly = _CANVAS_H - 28
    for ci, cat in enumerate(CATEGORIES):
        x = lx + ci * 110
        parts.append(f'<rect x="{x}" y="{ly}" width="14" height="14" fill="{_FILL[cat]}"/>')
        parts.append(f'<text x="{x + 20}" y="{ly + 12}" font-family="sans-serif" '
                     f'font-size="12">{cat}</text>')
    parts.append(f'<line x1="{_MARGIN_L}" y1="{base_y:.2f}" x2="{_CANVAS_W - _MARGIN_R}" '
                 f'y2="{base_y:.2f}" stroke="#333333" stroke-width="1.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report_svg(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_report_svg(rows))


def write_report_png(path, rows: list[dict]) -> None:
    """Matplotlib rendering of the same grouped bars (not byte-pinned)."""
    from matplotlib.figure import Figure

    fig = Figure(figsize=(7.2, 4.2), dpi=100)
    ax = fig.add_subplot(111)
    import numpy as np

    idx = np.arange(len(rows))
    width = 0.25
    for ci, cat in enumerate(CATEGORIES):
        vals = [float(r[f"{cat}_10k"]) for r in rows]
        ax.bar(idx + (ci - 1) * width, vals, width, label=cat, color=_FILL[cat])
    ax.set_xticks(idx)
    ax.set_xticklabels([r["model"] for r in rows])
    ax.set_ylabel("collisions per 10,000 frames")
    ax.set_title("Closed-loop collision rates")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
