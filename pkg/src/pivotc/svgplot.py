"""Minimal static SVG rate-distortion plots (log-scale rate axis)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def rd_svg(curves: dict, title: str = "", width: int = 640, height: int = 440,
           ylabel: str = "D1 PSNR (dB)") -> str:
    """One polyline per named :class:`RdCurve`; infinite PSNRs are listed, not drawn."""
    finite = {name: c.finite() for name, c in curves.items()}
    rates = [r for rs, _ in finite.values() for r in rs]
    psnrs = [p for _, ps in finite.values() for p in ps]
    left, right, top, bottom = 64, 20, 36, 52
    pw, ph = width - left - right, height - top - bottom
    if rates:
        lx0, lx1 = math.log10(min(rates)), math.log10(max(rates))
        y0, y1 = min(psnrs), max(psnrs)
    else:
        lx0, lx1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if lx1 - lx0 < 1e-9:
        lx0, lx1 = lx0 - 0.5, lx1 + 0.5
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(rate):
        return left + pw * (math.log10(rate) - lx0) / (lx1 - lx0)

    def sy(p):
        return top + ph * (1.0 - (p - y0) / (y1 - y0))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2}" y="22" text-anchor="middle">{escape(title)}</text>')
    for e in range(math.floor(lx0), math.ceil(lx1) + 1):
        for mult in (1, 2, 5):
            v = mult * 10.0**e
            if lx0 <= math.log10(v) <= lx1:
                x = sx(v)
                out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 5}" stroke="#444"/>')
                out.append(f'<text x="{x:.2f}" y="{top + ph + 18}" text-anchor="middle">{v:g}</text>')
    for i in range(6):
        p = y0 + (y1 - y0) * i / 5
        y = sy(p)
        out.append(f'<line x1="{left - 5}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="#444"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">{p:.1f}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">rate (bpp, log scale)</text>')
    out.append(
        f'<text transform="translate(16 {top + ph / 2}) rotate(-90)" text-anchor="middle">{escape(ylabel)}</text>'
    )
    for i, (name, (rs, ps)) in enumerate(finite.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{sx(r):.2f},{sy(p):.2f}" for r, p in zip(rs, ps))
        if len(rs):
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
            for r, p in zip(rs, ps):
                out.append(f'<circle cx="{sx(r):.2f}" cy="{sy(p):.2f}" r="3" fill="{color}"/>')
        n_inf = len(curves[name].rates) - len(rs)
        label = escape(name) + (f" ({n_inf} lossless point{'s' if n_inf > 1 else ''})" if n_inf else "")
        ly = top + 16 + 16 * i
        out.append(f'<line x1="{left + 10}" y1="{ly - 4}" x2="{left + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + 36}" y="{ly}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_rd_svg(path, curves: dict, title: str = "") -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(rd_svg(curves, title))

