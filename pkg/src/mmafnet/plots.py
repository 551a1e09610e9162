"""Self-contained SVG renderings of metric distributions.

Each plot is a right-continuous staircase of a cumulative distribution,
assembled from fixed-format strings so that the same input always yields
byte-identical SVG.  No external assets: plain shapes, monospace text.

The curve itself is a single <path id="curve"> whose data is a sequence of
absolute M/L commands, so tests (and curious readers) can parse the
polyline back out and check that it never decreases.
"""

import math
from xml.sax.saxutils import escape

from .metrics import FLOAT_FORMAT

__all__ = ["cdf_svg", "write_cdf_svg"]

_WIDTH = 480
_HEIGHT = 320
_LEFT = 56
_RIGHT = 16
_TOP = 36
_BOTTOM = 44

_PLOT_W = _WIDTH - _LEFT - _RIGHT
_PLOT_H = _HEIGHT - _TOP - _BOTTOM
_BASE_Y = _HEIGHT - _BOTTOM


def _coord(value):
    return "%.3f" % value


def _domain_for(cdf):
    lo = 0.0 if cdf.vmin >= 0.0 else math.floor(cdf.vmin)
    hi = 1.0 if cdf.vmax <= 1.0 else float(math.ceil(cdf.vmax))
    return float(lo), float(hi)


def cdf_svg(cdf, title, x_label="value", domain=None):
    """Render a MetricCdf as a standalone SVG document string.

    domain fixes the x axis range; by default [0, 1] for fraction-valued
    metrics, widening to the next integer when values exceed 1 (distances).
    """
    lo, hi = _domain_for(cdf) if domain is None else (float(domain[0]), float(domain[1]))
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo

    def px(x):
        return _LEFT + (x - lo) / span * _PLOT_W

    def py(fraction):
        return _BASE_Y - fraction * _PLOT_H

    commands = [f"M {_coord(px(lo))} {_coord(py(0.0))}"]
    previous = 0.0
    for x, fraction in cdf.points():
        commands.append(f"L {_coord(px(x))} {_coord(py(previous))}")
        commands.append(f"L {_coord(px(x))} {_coord(py(fraction))}")
        previous = fraction
    commands.append(f"L {_coord(px(hi))} {_coord(py(previous))}")
    path_data = " ".join(commands)

    x_ticks = (lo, lo + span / 2.0, hi)
    y_ticks = (0.0, 0.5, 1.0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" '
        f'height="{_HEIGHT}" viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect x="0" y="0" width="{_WIDTH}" height="{_HEIGHT}" fill="#ffffff"/>',
        f'<text x="{_WIDTH // 2}" y="22" text-anchor="middle" '
        f'font-family="monospace" font-size="14" fill="#111111">'
        f"{escape(title)}</text>",
    ]
    for fraction in y_ticks:
        y = _coord(py(fraction))
        parts.append(
            f'<line x1="{_LEFT}" y1="{y}" x2="{_WIDTH - _RIGHT}" y2="{y}" '
            f'stroke="#dddddd" stroke-width="1"/>')
        parts.append(
            f'<text x="{_LEFT - 6}" y="{y}" text-anchor="end" '
            f'dominant-baseline="middle" font-family="monospace" '
            f'font-size="11" fill="#444444">{"%.1f" % fraction}</text>')
    for tick in x_ticks:
        x = _coord(px(tick))
        parts.append(
            f'<line x1="{x}" y1="{_BASE_Y}" x2="{x}" y2="{_BASE_Y + 4}" '
            f'stroke="#444444" stroke-width="1"/>')
        parts.append(
            f'<text x="{x}" y="{_BASE_Y + 16}" text-anchor="middle" '
            f'font-family="monospace" font-size="11" fill="#444444">'
            f'{"%.2f" % tick}</text>')
    parts.append(
        f'<line x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{_BASE_Y}" '
        f'stroke="#444444" stroke-width="1"/>')
    parts.append(
        f'<line x1="{_LEFT}" y1="{_BASE_Y}" x2="{_WIDTH - _RIGHT}" '
        f'y2="{_BASE_Y}" stroke="#444444" stroke-width="1"/>')
    parts.append(
        f'<text x="{_WIDTH // 2}" y="{_HEIGHT - 8}" text-anchor="middle" '
        f'font-family="monospace" font-size="12" fill="#111111">'
        f"{escape(x_label)}</text>")
    parts.append(
        f'<path id="curve" d="{path_data}" fill="none" stroke="#1f6feb" '
        f'stroke-width="1.5"/>')

    stats = (
        ("min", cdf.vmin),
        ("max", cdf.vmax),
        ("median", cdf.median),
        ("mean", cdf.mean),
        ("std", cdf.std),
    )
    for index, (name, value) in enumerate(stats):
        parts.append(
            f'<text x="{_LEFT + 8}" y="{_TOP + 16 + 14 * index}" '
            f'font-family="monospace" font-size="11" fill="#333333">'
            f"{name}={FLOAT_FORMAT % value}</text>")

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_cdf_svg(path, cdf, title, x_label="value", domain=None):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(cdf_svg(cdf, title, x_label=x_label, domain=domain))
