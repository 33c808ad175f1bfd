"""Minimal hand-written SVG charts: learning curves per seed and grouped bar charts.

Every data element carries a class attribute (``trace reward``, ``trace cost``,
``mean cost``, ``budget``, ``bar reward`` ...) so the output can be inspected
programmatically as well as viewed.
"""
from __future__ import annotations

import math
from collections import defaultdict
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 300
PAD_L, PAD_R, PAD_T, PAD_B = 56, 16, 28, 40
COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class Frame:
    """Affine map from data coordinates to pixel coordinates of one panel."""

    def __init__(self, x_range, y_range, x0=0, y0=0, w=WIDTH, h=HEIGHT):
        self.x_lo, self.x_hi = x_range
        self.y_lo, self.y_hi = y_range
        if self.x_hi <= self.x_lo:
            self.x_hi = self.x_lo + 1
        if self.y_hi <= self.y_lo:
            self.y_hi = self.y_lo + 1
        self.left, self.top = x0 + PAD_L, y0 + PAD_T
        self.width, self.height = w - PAD_L - PAD_R, h - PAD_T - PAD_B

    def x(self, v: float) -> float:
        return self.left + (v - self.x_lo) / (self.x_hi - self.x_lo) * self.width

    def y(self, v: float) -> float:
        return self.top + (self.y_hi - v) / (self.y_hi - self.y_lo) * self.height

    def inverse_y(self, py: float) -> float:
        return self.y_hi - (py - self.top) / self.height * (self.y_hi - self.y_lo)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick(v: float) -> str:
    return f"{v:.3g}"


def _axes(fr: Frame, title: str, xlabel: str, ylabel: str) -> list:
    b = fr.top + fr.height
    out = [
        f'<text x="{_fmt(fr.left + fr.width / 2)}" y="{_fmt(fr.top - 10)}" text-anchor="middle" '
        f'class="title">{escape(title)}</text>',
        f'<line class="axis x" x1="{_fmt(fr.left)}" y1="{_fmt(b)}" x2="{_fmt(fr.left + fr.width)}" '
        f'y2="{_fmt(b)}" stroke="black"/>',
        f'<line class="axis y" x1="{_fmt(fr.left)}" y1="{_fmt(fr.top)}" x2="{_fmt(fr.left)}" '
        f'y2="{_fmt(b)}" stroke="black"/>',
        f'<text x="{_fmt(fr.left + fr.width / 2)}" y="{_fmt(b + 32)}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="{_fmt(fr.left - 44)}" y="{_fmt(fr.top + fr.height / 2)}" text-anchor="middle" '
        f'transform="rotate(-90 {_fmt(fr.left - 44)} {_fmt(fr.top + fr.height / 2)})">{escape(ylabel)}</text>',
    ]
    for v in (fr.y_lo, (fr.y_lo + fr.y_hi) / 2, fr.y_hi):
        out.append(f'<text x="{_fmt(fr.left - 4)}" y="{_fmt(fr.y(v) + 4)}" text-anchor="end" '
                   f'font-size="10">{_tick(v)}</text>')
    for v in (fr.x_lo, fr.x_hi):
        out.append(f'<text x="{_fmt(fr.x(v))}" y="{_fmt(b + 14)}" text-anchor="middle" '
                   f'font-size="10">{_tick(v)}</text>')
    return out


def _path(fr: Frame, pts, cls: str, color: str, width: float = 1.0) -> list:
    if not pts:
        return []
    d = " ".join(("M" if i == 0 else "L") + f"{_fmt(fr.x(x))},{_fmt(fr.y(y))}" for i, (x, y) in enumerate(pts))
    out = [f'<path class="{cls}" d="{d}" fill="none" stroke="{color}" stroke-width="{width}"/>']
    if len(pts) == 1:
        x, y = pts[0]
        out.append(f'<circle class="{cls} point" cx="{_fmt(fr.x(x))}" cy="{_fmt(fr.y(y))}" r="2.5" fill="{color}"/>')
    return out


def _range(values, extra=()):
    vals = [v for v in list(values) + list(extra) if math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    span = hi - lo or max(abs(hi), 1.0)
    return lo - 0.05 * span, hi + 0.05 * span


def _document(body: list, width: int, height: int) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def curves_svg(rows: list, budget: float, reward_key: str = "j_r_true", cost_key: str = "j_c_true") -> str:
    """Reward and cost versus episode: one trace per seed, the across-seed mean and the budget rule."""
    by_seed = defaultdict(list)
    for r in rows:
        by_seed[int(r["seed"])].append((int(r["episode"]), float(r[reward_key]), float(r[cost_key])))
    episodes = [e for pts in by_seed.values() for e, _, _ in pts]
    x_range = (min(episodes, default=0), max(episodes, default=1))
    body = []
    panels = (("reward", 1, "Reward return", ()), ("cost", 2, "Cost return", (budget,)))
    for i, (name, col, title, extra) in enumerate(panels):
        vals = [p[col] for pts in by_seed.values() for p in pts]
        fr = Frame(x_range, _range(vals, extra), x0=i * WIDTH)
        body += _axes(fr, title, "episode", name)
        means = defaultdict(list)
        for k, seed in enumerate(sorted(by_seed)):
            pts = sorted(by_seed[seed])
            body += _path(fr, [(q[0], q[col]) for q in pts], f"trace {name} seed-{seed}",
                          COLORS[k % len(COLORS)])
            for q in pts:
                means[q[0]].append(q[col])
        mean_pts = [(e, sum(v) / len(v)) for e, v in sorted(means.items())]
        body += _path(fr, mean_pts, f"mean {name}", "black", 2.0)
        if name == "cost":
            yb = fr.y(budget)
            body.append(f'<line class="budget" data-value="{budget!r}" x1="{_fmt(fr.left)}" y1="{_fmt(yb)}" '
                        f'x2="{_fmt(fr.left + fr.width)}" y2="{_fmt(yb)}" stroke="red" stroke-dasharray="6,3"/>')
    return _document(body, 2 * WIDTH, HEIGHT)


def bars_svg(groups: dict, budget: float) -> str:
    """Per configuration: normalized cumulative reward and worst cost excess over the budget.

    ``groups`` maps a configuration name to its rows. Cumulative reward is the
    mean over seeds of the summed reward return, divided by the best group's value.
    """
    names = list(groups)
    cum, excess = {}, {}
    for name, rows in groups.items():
        per_seed = defaultdict(float)
        worst = 0.0
        for r in rows:
            per_seed[int(r["seed"])] += float(r["j_r_true"])
            worst = max(worst, float(r["j_c_true"]) - budget)
        cum[name] = sum(per_seed.values()) / len(per_seed) if per_seed else 0.0
        excess[name] = worst
    top = max((abs(v) for v in cum.values()), default=1.0) or 1.0
    norm = {k: v / top for k, v in cum.items()}
    body = []
    for i, (metric, vals, title) in enumerate((("reward", norm, "Normalized cumulative reward"),
                                                ("violation", excess, "Max cost excess over budget"))):
        fr = Frame((0, max(len(names), 1)), _range(list(vals.values()), (0.0,)), x0=i * WIDTH)
        body += _axes(fr, title, "configuration", metric)
        base = fr.y(max(fr.y_lo, 0.0))
        for k, name in enumerate(names):
            v = vals[name]
            x0, x1 = fr.x(k + 0.15), fr.x(k + 0.85)
            y = fr.y(v)
            body.append(f'<rect class="bar {metric}" data-config="{escape(name)}" data-value="{v!r}" '
                        f'x="{_fmt(x0)}" y="{_fmt(min(y, base))}" width="{_fmt(x1 - x0)}" '
                        f'height="{_fmt(abs(base - y))}" fill="{COLORS[k % len(COLORS)]}"/>')
            body.append(f'<text x="{_fmt((x0 + x1) / 2)}" y="{_fmt(fr.top + fr.height + 26)}" '
                        f'text-anchor="middle" font-size="9">{escape(name)}</text>')
    return _document(body, 2 * WIDTH, HEIGHT)
