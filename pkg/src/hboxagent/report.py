"""Plain-text comparison tables, CSV writers and reliability diagrams drawn as sized circles."""

from __future__ import annotations

import csv
import io
import math
from typing import Mapping, Sequence

SIZE = 320
MARGIN = 40
MAX_RADIUS = 24.0

SERIES_COLORS = ("#1f77b4", "#2ca02c", "#d62728", "#9467bd")
BASELINE_COLOR = "#888888"


def bins_csv(bins: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_index", "mean_confidence", "accuracy", "count"])
    for b in bins:
        w.writerow([b["bin_index"], repr(float(b["mean_confidence"])), repr(float(b["empirical_accuracy"])),
                    b["count"]])
    return buf.getvalue()


def rows_csv(rows: Sequence[Mapping]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def _fmt(v, digits: int = 3) -> str:
    if v is None:
        return "-"
    return f"{v:.{digits}f}"


def summary_table(entries: Sequence[tuple[str, Mapping]]) -> str:
    """One row per variant with the Brier / ECE / P&G / adoption / WallMS columns."""
    header = ("Variant", "Brier", "ECE", "P&G Rate", "Adpt Rate", "WallMS")
    rows = [header]
    for name, m in entries:
        rows.append((name, _fmt(m["brier"]), _fmt(m["ece"]), _fmt(m["pg_rate"]), _fmt(m["adoption_rate"]),
                     _fmt(m.get("mean_wall_ms"), 2)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _xy(conf: float, acc: float) -> tuple[float, float]:
    span = SIZE - 2 * MARGIN
    return MARGIN + conf * span, SIZE - MARGIN - acc * span


def reliability_svg(series: Sequence[tuple[str, Sequence[Mapping]]],
                    baseline: Sequence[Mapping] | None = None, title: str = "") -> str:
    """Bubbles at (mean confidence, accuracy) per non-empty bin, radius ~ sqrt(count)."""
    all_bins = [b for _, bins in series for b in bins] + list(baseline or [])
    max_count = max((b["count"] for b in all_bins), default=1) or 1
    x0, y0 = _xy(0.0, 0.0)
    x1, y1 = _xy(1.0, 1.0)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">',
        f'<rect x="{x0:.1f}" y="{y1:.1f}" width="{x1 - x0:.1f}" height="{y0 - y1:.1f}" fill="none" stroke="#000"/>',
        f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x1:.1f}" y2="{y1:.1f}" stroke="#444" stroke-dasharray="4 3"/>',
        f'<text x="{SIZE / 2:.1f}" y="{SIZE - 8}" text-anchor="middle" font-size="12">Confidence</text>',
        f'<text x="12" y="{SIZE / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {SIZE / 2:.1f})">Accuracy</text>',
    ]
    if title:
        out.append(f'<text x="{SIZE / 2:.1f}" y="20" text-anchor="middle" font-size="13">{_esc(title)}</text>')

    def bubbles(bins, color, name):
        for b in bins:
            if not b["count"]:
                continue
            cx, cy = _xy(float(b["mean_confidence"]), float(b["empirical_accuracy"]))
            r = MAX_RADIUS * math.sqrt(b["count"] / max_count)
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r:.2f}" fill="{color}" fill-opacity="0.45" '
                       f'stroke="{color}"><title>{_esc(name)} bin {b["bin_index"]}: n={b["count"]}</title></circle>')

    if baseline is not None:
        bubbles(baseline, BASELINE_COLOR, "baseline")
    for i, (name, bins) in enumerate(series):
        bubbles(bins, SERIES_COLORS[i % len(SERIES_COLORS)], name)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
