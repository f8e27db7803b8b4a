"""Static SVG figures: trajectory overlays, attention timelines, metric bars.

Output is plain SVG text with fixed number formatting, so identical inputs
give byte-identical files.
"""

from __future__ import annotations

import csv
import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#2e8b57", "#8b5a2b", "#4169e1", "#c71585", "#ff8c00", "#708090", "#9acd32")
BACKGROUND = "#b0b0b0"


def _f(v):
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, width, height, title=""):
        self.w, self.h = width, height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        ]
        if title:
            self.text(width / 2, 18, title, size=14, anchor="middle")

    def text(self, x, y, s, size=11, anchor="start", color="black"):
        self.parts.append(
            f'<text x="{_f(x)}" y="{_f(y)}" font-family="sans-serif" font-size="{size}" '
            f'text-anchor="{anchor}" fill="{color}">{escape(str(s))}</text>'
        )

    def line(self, x1, y1, x2, y2, color="black", width=1.0, dash=""):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" stroke="{color}" stroke-width="{width}"{d}/>'
        )

    def rect(self, x, y, w, h, fill, opacity=1.0):
        self.parts.append(
            f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" fill="{fill}" fill-opacity="{opacity}"/>'
        )

    def circle(self, x, y, r, fill, opacity=1.0, stroke=""):
        s = f' stroke="{stroke}" stroke-width="0.6"' if stroke else ""
        self.parts.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{fill}" fill-opacity="{opacity}"{s}/>')

    def polyline(self, pts, color, width=1.5):
        s = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
        self.parts.append(f'<polyline points="{s}" fill="none" stroke="{color}" stroke-width="{width}"/>')

    def svg(self):
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _write(path, text):
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def trajectory_svg(states, t_obs, path=None, pred=None, main_agents=(0, 1), title="", size=480):
    """Top-down overlay of a scene; dot radius grows with the time index.

    ``states`` is [T, N, 2] ground truth; ``pred`` (optional) is
    [T - t_obs, N, 2] and is drawn hollow.
    """
    states = np.asarray(states, dtype=np.float64)
    T, N = states.shape[:2]
    pts = states.reshape(-1, 2)
    if pred is not None:
        pts = np.concatenate([pts, np.asarray(pred).reshape(-1, 2)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = max(float(np.max(hi - lo)), 1e-9)
    margin = 30
    scale = (size - 2 * margin) / span
    cx, cy = (lo + hi) / 2.0

    def xy(p):
        # +y of the scene points up on screen
        return size / 2 + (p[0] - cx) * scale, size / 2 - (p[1] - cy) * scale

    c = _Canvas(size, size, title)
    colors = {a: PALETTE[k % len(PALETTE)] for k, a in enumerate(main_agents or ())}
    for i in range(N):
        color = colors.get(i, BACKGROUND)
        for t in range(T):
            r = 1.0 + 3.0 * t / max(T - 1, 1)
            x, y = xy(states[t, i])
            c.circle(x, y, r, color, 1.0 if t < t_obs else 0.45)
        if pred is not None:
            for k, p in enumerate(np.asarray(pred)[:, i]):
                t = t_obs + k
                x, y = xy(p)
                c.circle(x, y, 1.0 + 3.0 * t / max(T - 1, 1), "none", stroke=color)
    c.text(8, size - 8, f"filled: observed (t < {t_obs}); faded: future; hollow: predicted", size=9)
    return _write(path, c.svg())


def _axes(c, x0, y0, w, h, ymax, ylabel, nticks=5):
    c.line(x0, y0 + h, x0 + w, y0 + h)
    c.line(x0, y0, x0, y0 + h)
    for k in range(nticks + 1):
        v = ymax * k / nticks
        y = y0 + h - h * k / nticks
        c.line(x0 - 3, y, x0, y)
        c.text(x0 - 5, y + 3, f"{v:.2g}", size=9, anchor="end")
    c.text(12, y0 - 8, ylabel, size=10)


def attention_timeline_svg(series, path=None, window=None, title="", ymax=1.0, width=560, height=300):
    """Line chart of per-step attention values.

    ``series`` maps a label to a 1-D array; ``window`` ``(start, stop)`` is
    shaded.
    """
    c = _Canvas(width, height, title)
    x0, y0, w, h = 50, 35, width - 170, height - 75
    T = max(len(v) for v in series.values())
    sx = w / max(T - 1, 1)
    if window is not None:
        a, b = window
        c.rect(x0 + a * sx, y0, max(0.0, (b - a) * sx), h, "#ffd700", 0.3)
    _axes(c, x0, y0, w, h, ymax, "attention")
    for k in range(0, T, 5):
        c.text(x0 + k * sx, y0 + h + 14, str(k), size=9, anchor="middle")
    c.text(x0 + w / 2, height - 8, "step", size=10, anchor="middle")
    for n, (label, vals) in enumerate(series.items()):
        color = PALETTE[n % len(PALETTE)]
        vals = np.asarray(vals, dtype=np.float64)
        c.polyline([(x0 + t * sx, y0 + h - h * min(v, ymax) / ymax) for t, v in enumerate(vals)], color)
        c.line(x0 + w + 15, y0 + 10 + 16 * n, x0 + w + 35, y0 + 10 + 16 * n, color, 2)
        c.text(x0 + w + 40, y0 + 14 + 16 * n, label, size=10)
    return _write(path, c.svg())


def bar_chart_svg(groups, path=None, title="", ylabel="ADE", width=640, height=320):
    """Grouped bars with error whiskers.

    ``groups`` maps a group label (e.g. case) to ``{bar label: (mean, std)}``.
    """
    c = _Canvas(width, height, title)
    x0, y0, w, h = 55, 35, width - 190, height - 80
    labels = []
    for bars in groups.values():
        labels += [b for b in bars if b not in labels]
    top = max((m + (s if math.isfinite(s) else 0.0)) for bars in groups.values() for m, s in bars.values())
    ymax = top * 1.1 if top > 0 else 1.0
    _axes(c, x0, y0, w, h, ymax, ylabel)
    gw = w / max(len(groups), 1)
    bw = gw * 0.8 / max(len(labels), 1)
    for g, (gname, bars) in enumerate(groups.items()):
        gx = x0 + g * gw + gw * 0.1
        for k, lab in enumerate(labels):
            if lab not in bars:
                continue
            m, s = bars[lab]
            bx = gx + k * bw
            bh = h * m / ymax
            c.rect(bx, y0 + h - bh, bw * 0.9, bh, PALETTE[k % len(PALETTE)])
            if math.isfinite(s) and s > 0:
                mid = bx + bw * 0.45
                c.line(mid, y0 + h - h * (m + s) / ymax, mid, y0 + h - h * max(m - s, 0.0) / ymax)
        c.text(gx + gw * 0.4, y0 + h + 16, gname, size=11, anchor="middle")
    for k, lab in enumerate(labels):
        c.rect(x0 + w + 15, y0 + 4 + 16 * k, 12, 10, PALETTE[k % len(PALETTE)])
        c.text(x0 + w + 32, y0 + 13 + 16 * k, lab, size=10)
    return _write(path, c.svg())


def write_series_csv(path, series, index_name="step"):
    """Columns ``index_name`` plus one column per series label."""
    labels = list(series)
    T = max(len(v) for v in series.values())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([index_name] + labels)
        for t in range(T):
            w.writerow([t] + [repr(float(series[k][t])) if t < len(series[k]) else "" for k in labels])
