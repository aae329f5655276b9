"""Minimal deterministic SVG line charts and heatmaps (no plotting dependency)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
W, H = 640, 400
ML, MR, MT, MB = 70, 150, 40, 50


def _num(v: float) -> str:
    return f"{v:.2f}"


def _finite(values: Sequence[float]) -> list[float]:
    return [v for v in values if isinstance(v, (int, float)) and math.isfinite(v)]


def _span(lo: float, hi: float) -> tuple[float, float]:
    if lo == hi:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    return lo, hi


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str,
               xlabel: str, ylabel: str) -> str:
    """Overlay of named (x, y) series. Non-finite points break the polyline."""
    xs = _finite([x for xv, _ in series.values() for x in xv])
    ys = _finite([y for _, yv in series.values() for y in yv])
    x0, x1 = _span(min(xs, default=0.0), max(xs, default=1.0))
    y0, y1 = _span(min(ys, default=0.0), max(ys, default=1.0))
    pw, ph = W - ML - MR, H - MT - MB

    def px(x: float) -> float:
        return ML + (x - x0) / (x1 - x0) * pw

    def py(y: float) -> float:
        return MT + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.0f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
           f'<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{_num(px(fx))}" y="{H - MB + 16}" text-anchor="middle" font-size="11">{fx:.4g}</text>')
        out.append(f'<text x="{ML - 6}" y="{_num(py(fy) + 4)}" text-anchor="end" font-size="11">{fy:.4g}</text>')
    out.append(f'<text x="{ML + pw / 2:.0f}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MT + ph / 2:.0f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {MT + ph / 2:.0f})">{escape(ylabel)}</text>')
    for k, (label, (xv, yv)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        runs, cur = [], []
        for x, y in zip(xv, yv):
            if math.isfinite(x) and math.isfinite(y):
                cur.append(f"{_num(px(x))},{_num(py(y))}")
            elif cur:
                runs.append(cur)
                cur = []
        if cur:
            runs.append(cur)
        for pts in runs:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        ly = MT + 14 + 18 * k
        out.append(f'<line x1="{W - MR + 10}" y1="{ly}" x2="{W - MR + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - MR + 36}" y="{ly + 4}" font-size="12">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap(values: Sequence[Sequence[float]], row_labels: Sequence[str], col_labels: Sequence[str],
            title: str, row_title: str, col_title: str) -> str:
    """Grid of cells shaded white (min) to red (max) with the value printed inside."""
    flat = _finite([v for row in values for v in row])
    lo, hi = min(flat, default=0.0), max(flat, default=0.0)
    nr, nc = len(row_labels), len(col_labels)
    cw = (W - ML - 40) / max(nc, 1)
    ch = (H - MT - MB) / max(nr, 1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.0f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>']
    for i, row in enumerate(values):
        for j, v in enumerate(row):
            x, y = ML + j * cw, MT + i * ch
            if math.isfinite(v):
                t = 0.0 if hi == lo else (v - lo) / (hi - lo)
                g = int(round(255 * (1 - t)))
                fill, text = f"rgb(255,{g},{g})", f"{v:.4g}"
            else:
                fill, text = "#dddddd", "n/a"
            out.append(f'<rect x="{_num(x)}" y="{_num(y)}" width="{_num(cw)}" height="{_num(ch)}" fill="{fill}" stroke="black"/>')
            out.append(f'<text x="{_num(x + cw / 2)}" y="{_num(y + ch / 2 + 4)}" text-anchor="middle" font-size="11">{text}</text>')
    for i, lab in enumerate(row_labels):
        out.append(f'<text x="{ML - 6}" y="{_num(MT + (i + 0.5) * ch + 4)}" text-anchor="end" font-size="11">{escape(lab)}</text>')
    for j, lab in enumerate(col_labels):
        out.append(f'<text x="{_num(ML + (j + 0.5) * cw)}" y="{H - MB + 16}" text-anchor="middle" font-size="11">{escape(lab)}</text>')
    out.append(f'<text x="{ML + (W - ML - 40) / 2:.0f}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(col_title)}</text>')
    out.append(f'<text x="16" y="{MT + (H - MT - MB) / 2:.0f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {MT + (H - MT - MB) / 2:.0f})">{escape(row_title)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write(path: str | Path, text: str) -> None:
    Path(path).write_text(text)
