"""Self-contained SVG renderings of pipeline artifacts.

Each plot kind reads one artifact file (JSON or CSV) written by the
pipeline stages and emits a standalone SVG without external fonts or
scripts. Kinds that show geometry (map-effect, embedding-scatter) use a
uniform scale, so distance ratios survive the viewport transform.
"""

import csv
import json
import re
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy import stats

PLOT_KINDS = ("coefficient-path", "residual-qq", "rootogram",
              "map-effect", "embedding-scatter")

WIDTH, HEIGHT = 640, 480
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 24, 40, 52
PALETTE = ("#1b6ca8", "#c0392b", "#27ae60", "#8e44ad", "#d35400",
           "#16a085", "#7f8c8d")

WEEK_NAME = re.compile(r"^(?:(?P<kind>.+)_)?week\[(?P<t>\d+)\]$")


class PlotError(ValueError):
    pass


def _fmt(x):
    return f"{float(x):.2f}"


def _tick_label(v):
    return f"{v:.3g}"


class _Canvas:
    """Maps data coordinates into the plot area, top-left pixel origin."""

    def __init__(self, xlim, ylim, uniform=False):
        self.x0, self.x1 = self._pad(*xlim)
        self.y0, self.y1 = self._pad(*ylim)
        self.px0, self.px1 = MARGIN_L, WIDTH - MARGIN_R
        self.py0, self.py1 = HEIGHT - MARGIN_B, MARGIN_T
        sx = (self.px1 - self.px0) / (self.x1 - self.x0)
        sy = (self.py0 - self.py1) / (self.y1 - self.y0)
        if uniform:
            s = min(sx, sy)
            xc, yc = 0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)
            half_x = 0.5 * (self.px1 - self.px0) / s
            half_y = 0.5 * (self.py0 - self.py1) / s
            self.x0, self.x1 = xc - half_x, xc + half_x
            self.y0, self.y1 = yc - half_y, yc + half_y
            sx = sy = s
        self.sx, self.sy = sx, sy
        self.elements = []

    @staticmethod
    def _pad(lo, hi):
        lo, hi = float(lo), float(hi)
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        span = hi - lo
        return lo - 0.05 * span, hi + 0.05 * span

    def x(self, v):
        return self.px0 + (float(v) - self.x0) * self.sx

    def y(self, v):
        return self.py0 - (float(v) - self.y0) * self.sy

    def add(self, element):
        self.elements.append(element)

    def line(self, x1, y1, x2, y2, stroke="#333", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" '
                 f'y2="{_fmt(y2)}" stroke="{stroke}" stroke-width="{width}"{d}/>')

    def text(self, x, y, s, size=12, anchor="start", fill="#333", rotate=None):
        r = (f' transform="rotate(-90 {_fmt(x)} {_fmt(y)})"' if rotate else "")
        self.add(f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
                 f'text-anchor="{anchor}" fill="{fill}"{r}>{escape(str(s))}</text>')

    def circle(self, cx, cy, r, fill, opacity=1.0):
        self.add(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r)}" '
                 f'fill="{fill}" fill-opacity="{opacity}"/>')

    def polyline(self, pts, stroke, width=2.0):
        coords = " ".join(f"{_fmt(self.x(px))},{_fmt(self.y(py))}" for px, py in pts)
        self.add(f'<polyline points="{coords}" fill="none" stroke="{stroke}" '
                 f'stroke-width="{width}"/>')

    def polygon(self, pts, fill, opacity):
        coords = " ".join(f"{_fmt(self.x(px))},{_fmt(self.y(py))}" for px, py in pts)
        self.add(f'<polygon points="{coords}" fill="{fill}" '
                 f'fill-opacity="{opacity}" stroke="none"/>')

    def frame_and_ticks(self, title, xlabel, ylabel):
        self.add(f'<rect x="{self.px0}" y="{self.py1}" '
                 f'width="{self.px1 - self.px0}" height="{self.py0 - self.py1}" '
                 f'fill="none" stroke="#999"/>')
        for v in np.linspace(self.x0, self.x1, 5):
            px = self.x(v)
            self.line(px, self.py0, px, self.py0 + 4, stroke="#999")
            self.text(px, self.py0 + 18, _tick_label(v), size=10, anchor="middle")
        for v in np.linspace(self.y0, self.y1, 5):
            py = self.y(v)
            self.line(self.px0 - 4, py, self.px0, py, stroke="#999")
            self.text(self.px0 - 8, py + 3, _tick_label(v), size=10, anchor="end")
        self.text(WIDTH / 2, 22, title, size=14, anchor="middle")
        self.text(WIDTH / 2, HEIGHT - 14, xlabel, size=12, anchor="middle")
        self.text(18, HEIGHT / 2, ylabel, size=12, anchor="middle", rotate=True)

    def svg(self):
        head = ('<?xml version="1.0" encoding="UTF-8"?>\n'
                f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
                f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" '
                'font-family="sans-serif">\n'
                f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>\n')
        return head + "\n".join(self.elements) + "\n</svg>\n"


def _read_rows(path, columns, kind):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            missing = [c for c in columns if c not in fields]
            if missing:
                raise PlotError(
                    f"artifact does not match {kind}: missing column {missing[0]!r}")
            return list(reader)
    except (OSError, UnicodeDecodeError) as err:
        raise PlotError(f"cannot read artifact for {kind}: {err}")


def _coefficient_path(path, out):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as err:
        raise PlotError(f"artifact does not match coefficient-path: {err}")
    coefs = data.get("coefficients")
    if not isinstance(coefs, list):
        raise PlotError("artifact does not match coefficient-path: "
                        "no coefficient table found")
    families = {}
    for row in coefs:
        m = WEEK_NAME.match(str(row.get("name", "")))
        if m is None:
            continue
        fam = m.group("kind") or "week effect"
        families.setdefault(fam, []).append(
            (int(m.group("t")), float(row["estimate"]), float(row["se"])))
    if not families:
        raise PlotError("artifact does not match coefficient-path: "
                        "no per-week coefficients found")
    lo = min(e - 1.96 * s for pts in families.values() for _, e, s in pts)
    hi = max(e + 1.96 * s for pts in families.values() for _, e, s in pts)
    weeks = sorted({t for pts in families.values() for t, _, _ in pts})
    canvas = _Canvas((weeks[0], weeks[-1]), (lo, hi))
    canvas.frame_and_ticks("Per-week coefficients with 95% bands",
                           "week", "estimate")
    for idx, fam in enumerate(sorted(families)):
        pts = sorted(families[fam])
        color = PALETTE[idx % len(PALETTE)]
        band = ([(t, e - 1.96 * s) for t, e, s in pts]
                + [(t, e + 1.96 * s) for t, e, s in reversed(pts)])
        canvas.polygon(band, fill=color, opacity=0.15)
        canvas.polyline([(t, e) for t, e, _ in pts], stroke=color)
        for t, e, _ in pts:
            canvas.circle(canvas.x(t), canvas.y(e), 2.5, fill=color)
        ly = MARGIN_T + 16 + 16 * idx
        canvas.line(canvas.px1 - 150, ly - 4, canvas.px1 - 126, ly - 4,
                    stroke=color, width=3)
        canvas.text(canvas.px1 - 120, ly, fam, size=11)
    Path(out).write_text(canvas.svg(), encoding="utf-8")


def _residual_qq(path, out):
    rows = _read_rows(path, ["residual"], "residual-qq")
    if not rows:
        raise PlotError("empty residual set")
    r = np.sort(np.array([float(row["residual"]) for row in rows]))
    n = len(r)
    q = stats.norm.ppf((np.arange(n) + 0.5) / n)
    lim = (min(q[0], r[0]), max(q[-1], r[-1]))
    canvas = _Canvas(lim, lim)
    canvas.frame_and_ticks("Randomized quantile residuals",
                           "standard normal quantile", "observed quantile")
    canvas.polyline([(lim[0], lim[0]), (lim[1], lim[1])], stroke="#aaaaaa",
                    width=1.0)
    for qi, ri in zip(q, r):
        canvas.circle(canvas.x(qi), canvas.y(ri), 2.2, fill=PALETTE[0],
                      opacity=0.7)
    Path(out).write_text(canvas.svg(), encoding="utf-8")


def _rootogram(path, out):
    rows = _read_rows(path, ["count", "observed", "expected"], "rootogram")
    if not rows:
        raise PlotError("empty rootogram")
    values = np.array([int(row["count"]) for row in rows])
    obs = np.sqrt([float(row["observed"]) for row in rows])
    exp = np.sqrt([float(row["expected"]) for row in rows])
    canvas = _Canvas((values[0] - 0.5, values[-1] + 0.5),
                     (0.0, float(max(obs.max(), exp.max()))))
    canvas.frame_and_ticks("Rootogram", "count", "sqrt frequency")
    half = 0.4 * canvas.sx
    for v, o in zip(values, obs):
        px, py = canvas.x(v), canvas.y(o)
        h = canvas.y(0.0) - py
        canvas.add(f'<rect x="{_fmt(px - half)}" y="{_fmt(py)}" '
                   f'width="{_fmt(2 * half)}" height="{_fmt(h)}" '
                   f'fill="{PALETTE[0]}" fill-opacity="0.55"/>')
    canvas.polyline(list(zip(values, exp)), stroke=PALETTE[1])
    for v, e in zip(values, exp):
        canvas.circle(canvas.x(v), canvas.y(e), 2.5, fill=PALETTE[1])
    Path(out).write_text(canvas.svg(), encoding="utf-8")


def _map_effect(path, out):
    rows = _read_rows(path, ["district_id", "lon", "lat", "effect"], "map-effect")
    if not rows:
        raise PlotError("empty map artifact")
    lon = np.array([float(r["lon"]) for r in rows])
    lat = np.array([float(r["lat"]) for r in rows])
    eff = np.array([float(r["effect"]) for r in rows])
    canvas = _Canvas((lon.min(), lon.max()), (lat.min(), lat.max()), uniform=True)
    canvas.frame_and_ticks("District effects", "longitude", "latitude")
    top = max(np.abs(eff).max(), 1e-12)
    for x, y, e in zip(lon, lat, eff):
        radius = 2.0 + 12.0 * np.sqrt(abs(e) / top)
        color = PALETTE[1] if e >= 0 else PALETTE[0]
        canvas.circle(canvas.x(x), canvas.y(y), radius, fill=color, opacity=0.6)
    canvas.text(canvas.px0 + 6, MARGIN_T + 16,
                "area ~ |effect|; red positive, blue negative", size=11)
    Path(out).write_text(canvas.svg(), encoding="utf-8")


def _embedding_scatter(path, out):
    rows = _read_rows(path, ["district_id", "dim1", "dim2"], "embedding-scatter")
    if not rows:
        raise PlotError("empty coordinate artifact")
    z1 = np.array([float(r["dim1"]) for r in rows])
    z2 = np.array([float(r["dim2"]) for r in rows])
    canvas = _Canvas((z1.min(), z1.max()), (z2.min(), z2.max()), uniform=True)
    canvas.frame_and_ticks("Embedding coordinates", "dimension 1", "dimension 2")
    for row, x, y in zip(rows, z1, z2):
        canvas.circle(canvas.x(x), canvas.y(y), 4.0, fill=PALETTE[0], opacity=0.8)
        canvas.text(canvas.x(x) + 6, canvas.y(y) - 6, row["district_id"], size=10)
    Path(out).write_text(canvas.svg(), encoding="utf-8")


_RENDERERS = {
    "coefficient-path": _coefficient_path,
    "residual-qq": _residual_qq,
    "rootogram": _rootogram,
    "map-effect": _map_effect,
    "embedding-scatter": _embedding_scatter,
}


def render_svg(artifact, kind, out_path):
    """Render one artifact file into a standalone SVG and return its path."""
    if kind not in _RENDERERS:
        raise PlotError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    artifact = Path(artifact)
    if not artifact.exists():
        raise PlotError(f"artifact {artifact} does not exist")
    _RENDERERS[kind](artifact, out_path)
    return Path(out_path)
