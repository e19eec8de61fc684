"""Self-contained SVG line charts from curve CSVs.

No plotting backend: the SVG is assembled as text.  Every input CSV must
carry a sigma column; the plotted value column is "value" when present,
otherwise "acc_test", otherwise the second column.  The x axis is log-scaled
in sigma.  Series polylines are the only <polyline> elements in the output,
so they are easy to count and inspect.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

from .errors import SchemaMismatch

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 150, 24, 48


def read_curve_csv(path):
    """(label, sigmas, values) from one curve CSV."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise SchemaMismatch(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    if "sigma" not in header:
        raise SchemaMismatch(f"{path}: no sigma column in {header}")
    si = header.index("sigma")
    if "value" in header:
        vi = header.index("value")
    elif "acc_test" in header:
        vi = header.index("acc_test")
    elif len(header) > 1:
        vi = 1 if si != 1 else 0
    else:
        raise SchemaMismatch(f"{path}: no value column")
    label = path.stem
    for tag_col in ("estimator", "probe_kind"):
        if tag_col in header:
            ti = header.index(tag_col)
            if rows[1][ti]:
                label = rows[1][ti]
            break
    sigmas, values = [], []
    for row in rows[1:]:
        if not row or all(not c for c in row):
            continue
        sigmas.append(float(row[si]))
        values.append(float(row[vi]))
    if not sigmas:
        raise SchemaMismatch(f"{path}: no data rows")
    return label, sigmas, values


def plot_curves(csv_paths, out_path, title: str = "", ylabel: str = "value"):
    """Render one or more curve CSVs as a single SVG file."""
    series = [read_curve_csv(p) for p in csv_paths]
    if not series:
        raise SchemaMismatch("no input CSVs")
    all_sig = [s for _, sigs, _ in series for s in sigs]
    all_val = [v for _, _, vals in series for v in vals]
    if min(all_sig) <= 0:
        raise SchemaMismatch("sigma values must be positive for a log axis")
    lx0, lx1 = math.log10(min(all_sig)), math.log10(max(all_sig))
    if lx1 == lx0:
        lx1 = lx0 + 1.0
    v0, v1 = min(all_val), max(all_val)
    if v1 == v0:
        v1 = v0 + 1.0
    pad = 0.05 * (v1 - v0)
    v0, v1 = v0 - pad, v1 + pad
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(sig):
        return MARGIN_L + plot_w * (math.log10(sig) - lx0) / (lx1 - lx0)

    def py(val):
        return MARGIN_T + plot_h * (1.0 - (val - v0) / (v1 - v0))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#444" stroke-width="1"/>',
    ]
    if title:
        parts.append(
            f'<text x="{MARGIN_L + plot_w / 2:.1f}" y="16" text-anchor="middle">{title}</text>'
        )
    # decade ticks on the log axis
    for dec in range(math.floor(lx0), math.ceil(lx1) + 1):
        sig = 10.0**dec
        if not (min(all_sig) <= sig <= max(all_sig)):
            continue
        x = px(sig)
        parts.append(
            f'<line x1="{x:.1f}" y1="{MARGIN_T + plot_h}" x2="{x:.1f}" '
            f'y2="{MARGIN_T + plot_h + 5}" stroke="#444"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{MARGIN_T + plot_h + 18}" text-anchor="middle">1e{dec}</text>'
        )
    for frac in (0.0, 0.5, 1.0):
        val = v0 + frac * (v1 - v0)
        y = py(val)
        parts.append(
            f'<line x1="{MARGIN_L - 5}" y1="{y:.1f}" x2="{MARGIN_L}" y2="{y:.1f}" stroke="#444"/>'
        )
        parts.append(
            f'<text x="{MARGIN_L - 8}" y="{y + 4:.1f}" text-anchor="end">{val:.3g}</text>'
        )
    parts.append(
        f'<text x="{MARGIN_L + plot_w / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle">sigma</text>'
    )
    parts.append(
        f'<text x="14" y="{MARGIN_T + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {MARGIN_T + plot_h / 2:.1f})">{ylabel}</text>'
    )
    for i, (label, sigs, vals) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(s):.2f},{py(v):.2f}" for s, v in zip(sigs, vals))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>'
        )
        ly = MARGIN_T + 14 + 18 * i
        lx = WIDTH - MARGIN_R + 10
        parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.8"/>'
        )
        parts.append(f'<text x="{lx + 28}" y="{ly}">{label}</text>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    Path(out_path).write_text(text)
    return text
