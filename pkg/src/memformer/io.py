"""Atomic file output, curve CSVs and a small self-contained SVG line plot."""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from pathlib import Path

CURVE_HEADER = ("layer", "curve_name", "mean_log_loss", "stderr")


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def curves_csv(curves) -> str:
    """CSV text for ``[(name, means, stderrs), ...]``; one row per layer per curve."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for name, means, errs in curves:
        for layer, (m, e) in enumerate(zip(means, errs)):
            w.writerow((layer, name, _fmt(m), _fmt(e)))
    return buf.getvalue()


def write_curves_csv(path, curves) -> None:
    atomic_write_text(path, curves_csv(curves))


def read_curves_csv(path) -> dict:
    """``{curve_name: [(layer, mean, stderr), ...]}``."""
    out: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != CURVE_HEADER:
            raise ValueError(f"unexpected header {header}")
        for layer, name, m, e in r:
            out.setdefault(name, []).append((int(layer), float(m), float(e)))
    return out


def write_rows_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    atomic_write_text(path, buf.getvalue())


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2")


def _ticks(lo, hi, count=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def svg_line_plot(curves, title="", xlabel="layer", ylabel="mean log-loss (natural log)", width=640, height=420) -> str:
    """Render ``[(name, ys, errs), ...]`` against ``x = 0, 1, ...`` with error bars."""
    left, right, top, bottom = 70, 170, 40, 55
    pw, ph = width - left - right, height - top - bottom
    finite = [v for _, ys, es in curves for y, e in zip(ys, es) for v in (y - e, y + e) if math.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    yt = _ticks(lo, hi)
    lo, hi = min(lo, yt[0]), max(hi, yt[-1])
    xmax = max((len(ys) for _, ys, _ in curves), default=2) - 1
    xmax = max(xmax, 1)

    def sx(x):
        return left + pw * x / xmax

    def sy(y):
        return top + ph * (hi - y) / (hi - lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{_esc(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for t in yt:
        y = sy(t)
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{t:g}</text>')
    for x in range(xmax + 1):
        out.append(f'<text x="{sx(x):.2f}" y="{top + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{x}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" font-size="13">{_esc(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{_esc(ylabel)}</text>'
    )
    for k, (name, ys, es) in enumerate(curves):
        color = _PALETTE[k % len(_PALETTE)]
        pts = [(sx(x), sy(y)) for x, y in enumerate(ys) if math.isfinite(y)]
        if pts:
            path = " ".join(f"{px:.2f},{py:.2f}" for px, py in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, (y, e) in enumerate(zip(ys, es)):
            if not (math.isfinite(y) and math.isfinite(e)):
                continue
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
            if e > 0:
                out.append(f'<line x1="{sx(x):.2f}" y1="{sy(y - e):.2f}" x2="{sx(x):.2f}" y2="{sy(y + e):.2f}" stroke="{color}"/>')
        ly = top + 14 + 20 * k
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-family="sans-serif" font-size="11">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_svg(path, curves, **kw) -> None:
    atomic_write_text(path, svg_line_plot(curves, **kw))
