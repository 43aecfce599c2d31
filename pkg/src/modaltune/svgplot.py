"""Tiny hand-rolled SVG plots (step curves, bars, heat strips).

Hand-rolled rather than a plotting library so the output bytes are a pure
function of the data: rerunning a report must reproduce files exactly.
"""
from __future__ import annotations

W, H = 640, 400
MARGIN = 56
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _fmt(x: float) -> str:
    return f"{x:.4f}".rstrip("0").rstrip(".")


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{title}</text>',
    ]


def _axes(xlabel: str, ylabel: str) -> list[str]:
    x0, y0, x1, y1 = MARGIN, H - MARGIN, W - MARGIN, MARGIN
    return [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) / 2}" y="{H - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{(y0 + y1) / 2}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {(y0 + y1) / 2})">{ylabel}</text>',
    ]


def _scale(v: float, lo: float, hi: float, p0: float, p1: float) -> float:
    if hi == lo:
        return (p0 + p1) / 2
    return p0 + (v - lo) / (hi - lo) * (p1 - p0)


def step_curve_svg(path, curves, title: str, xlabel: str = "months",
                   ylabel: str = "survival") -> None:
    """curves: list of (label, xs, ys) rendered as right-continuous steps."""
    all_x = [x for _, xs, _ in curves for x in xs]
    x_lo, x_hi = 0.0, max(all_x) if all_x else 1.0
    parts = _header(title) + _axes(xlabel, ylabel)
    for k, (label, xs, ys) in enumerate(curves):
        color = PALETTE[k % len(PALETTE)]
        pts = []
        prev_y = None
        for x, y in zip(xs, ys):
            px = _scale(x, x_lo, x_hi, MARGIN, W - MARGIN)
            py = _scale(y, 0.0, 1.0, H - MARGIN, MARGIN)
            if prev_y is not None:
                pts.append(f"{_fmt(px)},{_fmt(prev_y)}")
            pts.append(f"{_fmt(px)},{_fmt(py)}")
            prev_y = py
        parts.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{W - MARGIN - 150}" y="{MARGIN + 16 * (k + 1)}" '
                     f'font-family="sans-serif" font-size="12" fill="{color}">'
                     f'{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def bar_svg(path, names, values, title: str, ylabel: str = "value") -> None:
    parts = _header(title) + _axes("", ylabel)
    lo = min(0.0, min(values)) if values else 0.0
    hi = max(0.0, max(values)) if values else 1.0
    n = max(1, len(values))
    band = (W - 2 * MARGIN) / n
    zero_y = _scale(0.0, lo, hi, H - MARGIN, MARGIN)
    for k, (name, v) in enumerate(zip(names, values)):
        x = MARGIN + k * band + band * 0.15
        y = _scale(v, lo, hi, H - MARGIN, MARGIN)
        top, height = (y, zero_y - y) if v >= 0 else (zero_y, y - zero_y)
        color = PALETTE[1] if v >= 0 else PALETTE[0]
        parts.append(f'<rect x="{_fmt(x)}" y="{_fmt(top)}" width="{_fmt(band * 0.7)}" '
                     f'height="{_fmt(max(height, 0.0))}" fill="{color}"/>')
        parts.append(f'<text x="{_fmt(x + band * 0.35)}" y="{H - MARGIN + 14}" '
                     f'text-anchor="middle" font-family="sans-serif" font-size="9">'
                     f'{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def heat_strip_svg(path, rows, row_labels, title: str) -> None:
    """rows: list of equal-length weight vectors rendered as color strips."""
    parts = _header(title)
    n_rows = len(rows)
    strip_h = min(40.0, (H - 2 * MARGIN) / max(1, n_rows))
    for r, (label, row) in enumerate(zip(row_labels, rows)):
        lo, hi = min(row), max(row)
        span = (hi - lo) or 1.0
        y = MARGIN + r * (strip_h + 8)
        cell_w = (W - 2 * MARGIN - 90) / max(1, len(row))
        for c, v in enumerate(row):
            t = (v - lo) / span
            red = int(255 * t)
            blue = int(255 * (1 - t))
            parts.append(f'<rect x="{_fmt(MARGIN + 90 + c * cell_w)}" y="{_fmt(y)}" '
                         f'width="{_fmt(cell_w + 0.5)}" height="{_fmt(strip_h)}" '
                         f'fill="rgb({red},0,{blue})"/>')
        parts.append(f'<text x="{MARGIN}" y="{_fmt(y + strip_h / 2 + 4)}" '
                     f'font-family="sans-serif" font-size="10">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
