"""Sparsity vs. target-accuracy line chart rendered as plain SVG."""
from __future__ import annotations

from collections import defaultdict
from html import escape
from typing import Iterable

from .metrics import MetricsRecord

WIDTH, HEIGHT = 680, 420
LEFT, RIGHT, TOP, BOTTOM = 64, 200, 36, 56

_COLORS = {"DSS": "#d62728", "L2": "#1f77b4", "ReverseDSS": "#2ca02c", "Random": "#7f7f7f", "baseline": "#444444"}
_FALLBACK = ("#9467bd", "#8c564b", "#e377c2", "#bcbd22", "#17becf")
_ORDER = ("DSS", "L2", "ReverseDSS", "Random")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def series_means(records: Iterable[MetricsRecord]) -> dict[str, list[tuple[float, float, int]]]:
    """method -> sorted ``(sparsity, mean target_after_ft, seed count)`` points."""
    buckets: dict[str, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        buckets[r.method_tag][r.sparsity_ratio].append(r.target_acc_after_ft)
    out = {}
    for method, points in buckets.items():
        out[method] = [(x, sum(ys) / len(ys), len(ys)) for x, ys in sorted(points.items())]
    return out


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    if lo == hi:
        lo, hi = lo - 0.05, hi + 0.05
    step = 0.05 if hi - lo <= 0.5 else 0.1
    lo = max(0.0, (int(lo / step + 1e-9) - (lo < 0)) * step)
    hi = min(1.0, -int(-hi / step - 1e-9) * step)
    return (lo, hi) if hi > lo else (0.0, 1.0)


def render_sparsity_plot(records: Iterable[MetricsRecord], title: str = "Target accuracy after finetuning") -> str:
    series = series_means(records)
    methods = [m for m in _ORDER if m in series] + sorted(m for m in series if m not in _ORDER)
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if x_lo == x_hi:
        x_lo, x_hi = max(0.0, x_lo - 0.1), x_hi + 0.1
    y_lo, y_hi = _nice_range(min(ys), max(ys)) if ys else (0.0, 1.0)
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x: float) -> float:
        return LEFT + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y: float) -> float:
        return TOP + (1 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{LEFT + pw / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for i in range(6):
        xv = x_lo + (x_hi - x_lo) * i / 5
        yv = y_lo + (y_hi - y_lo) * i / 5
        out.append(f'<line x1="{px(xv):.1f}" y1="{TOP + ph}" x2="{px(xv):.1f}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(xv):.1f}" y="{TOP + ph + 18}" text-anchor="middle">{_fmt(xv)}</text>')
        out.append(f'<line x1="{LEFT - 5}" y1="{py(yv):.1f}" x2="{LEFT + pw}" y2="{py(yv):.1f}" stroke="#dddddd"/>')
        out.append(f'<text x="{LEFT - 8}" y="{py(yv) + 4:.1f}" text-anchor="end">{_fmt(yv)}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 14}" text-anchor="middle">channel sparsity ratio</text>')
    out.append(
        f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">target accuracy (mean over seeds)</text>'
    )

    for k, method in enumerate(methods):
        color = _COLORS.get(method, _FALLBACK[k % len(_FALLBACK)])
        pts = series[method]
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y, _ in pts)
        out.append(f'<g class="series" data-method="{escape(method)}">')
        if len(pts) > 1:
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y, n in pts:
            out.append(
                f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3.5" fill="{color}">'
                f"<title>{escape(method)} sparsity {x:.3f}: {y:.4f} (n={n})</title></circle>"
            )
        out.append("</g>")
        counts = sorted({n for _, _, n in pts})
        label = f"{method} (seeds/point: {','.join(map(str, counts))})"
        ly = TOP + 14 + 20 * k
        out.append(f'<line x1="{LEFT + pw + 14}" y1="{ly}" x2="{LEFT + pw + 38}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 44}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
