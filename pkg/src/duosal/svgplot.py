"""Tiny hand-rolled SVG line plots — no plotting dependency needed."""

from __future__ import annotations

from xml.sax.saxutils import escape

_W, _H = 640, 480
_ML, _MR, _MT, _MB = 70, 20, 40, 60        # margins
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _ticks(lo, hi, n=6):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_plot(curves, title="", xlabel="", ylabel="",
              xlim=(0.0, 1.0), ylim=(0.0, 1.0)):
    """curves: list of (label, xs, ys). Returns an SVG document string."""
    pw = _W - _ML - _MR
    ph = _H - _MT - _MB
    x0, x1 = xlim
    y0, y1 = ylim

    def px(x):
        return _ML + pw * (x - x0) / (x1 - x0)

    def py(y):
        return _MT + ph * (1.0 - (y - y0) / (y1 - y0))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{escape(title)}</text>',
    ]
    for tx in _ticks(x0, x1):
        parts.append(f'<line x1="{px(tx):.1f}" y1="{_MT}" x2="{px(tx):.1f}" '
                     f'y2="{_MT + ph}" stroke="#ddd"/>')
        parts.append(f'<text x="{px(tx):.1f}" y="{_MT + ph + 18}" '
                     f'text-anchor="middle" font-size="11" '
                     f'font-family="sans-serif">{tx:.2f}</text>')
    for ty in _ticks(y0, y1):
        parts.append(f'<line x1="{_ML}" y1="{py(ty):.1f}" x2="{_ML + pw}" '
                     f'y2="{py(ty):.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{_ML - 8}" y="{py(ty) + 4:.1f}" '
                     f'text-anchor="end" font-size="11" '
                     f'font-family="sans-serif">{ty:.2f}</text>')
    parts.append(f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" '
                 f'fill="none" stroke="#333"/>')
    parts.append(f'<text x="{_ML + pw / 2}" y="{_H - 14}" text-anchor="middle" '
                 f'font-size="13" font-family="sans-serif">{escape(xlabel)}</text>')
    parts.append(f'<text x="18" y="{_MT + ph / 2}" text-anchor="middle" '
                 f'font-size="13" font-family="sans-serif" '
                 f'transform="rotate(-90 18 {_MT + ph / 2})">{escape(ylabel)}</text>')

    for ci, (label, xs, ys) in enumerate(curves):
        color = _COLORS[ci % len(_COLORS)]
        pts = " ".join(f"{px(float(x)):.2f},{py(float(y)):.2f}"
                       for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        ly = _MT + 18 + 16 * ci
        parts.append(f'<line x1="{_ML + pw - 130}" y1="{ly - 4}" '
                     f'x2="{_ML + pw - 105}" y2="{ly - 4}" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{_ML + pw - 100}" y="{ly}" font-size="12" '
                     f'font-family="sans-serif">{escape(str(label))}</text>')

    parts.append("</svg>")
    return "\n".join(parts)
