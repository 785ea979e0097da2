"""Dependency-free SVG line plots for the cross-validation reports."""
from __future__ import annotations

from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2")


def line_plot(series, title, xlabel, ylabel, xlim=(0.0, 1.0), ylim=(0.0, 1.0), diagonal=False,
              width=480, height=400) -> str:
    """``series`` is a list of ``(label, xs, ys)``; returns SVG text."""
    left, right, top, bottom = 60, 150, 30, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - xlim[0]) / (xlim[1] - xlim[0]) * pw

    def sy(y):
        return top + ph - (y - ylim[0]) / (ylim[1] - ylim[0]) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 15 {top + ph / 2:.1f})">{escape(ylabel)}</text>']
    for i in range(6):
        fx = xlim[0] + i * (xlim[1] - xlim[0]) / 5
        fy = ylim[0] + i * (ylim[1] - ylim[0]) / 5
        out.append(f'<text x="{sx(fx):.1f}" y="{top + ph + 15}" text-anchor="middle">{fx:.2f}</text>')
        out.append(f'<text x="{left - 6}" y="{sy(fy) + 4:.1f}" text-anchor="end">{fy:.2f}</text>')
    if diagonal:
        out.append(f'<line x1="{sx(xlim[0]):.1f}" y1="{sy(ylim[0]):.1f}" x2="{sx(xlim[1]):.1f}" '
                   f'y2="{sy(ylim[1]):.1f}" stroke="#999" stroke-dasharray="4 3"/>')
    for k, (label, xs, ys) in enumerate(series):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>')
        ly = top + 12 + 16 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
