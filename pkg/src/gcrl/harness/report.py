"""Aggregate record files into metric and learning-curve tables."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import DEFAULT_THRESHOLDS
from .metrics import DEFAULT_WINDOW, auc_at_n, final_return, smooth, steps_to_threshold
from .records import read_record

METRIC_COLUMNS = ("env", "mode", "seed", "auc", "steps_to_thr", "final_return")
CURVE_COLUMNS = ("env", "mode", "step", "n_seeds", "mean_return", "mean_smoothed", "min_return", "max_return")


def _settings(rec, meta: dict) -> tuple[float, float, int]:
    n = float(meta.get("total_steps", rec.eval_steps[-1]))
    n = min(n, float(rec.eval_steps[-1]))
    thr = meta.get("threshold")
    if thr is None:
        thr = DEFAULT_THRESHOLDS.get(rec.env, np.inf)
    return n, float(thr), int(meta.get("window", DEFAULT_WINDOW))


def metric_rows(loaded) -> list[dict]:
    rows = []
    for rec, meta in loaded:
        n, thr, window = _settings(rec, meta)
        rows.append({"env": rec.env, "mode": rec.mode, "seed": rec.seed,
                     "auc": auc_at_n(rec, n, window),
                     "steps_to_thr": steps_to_threshold(rec, thr, n, window),
                     "final_return": final_return(rec)})
    rows.sort(key=lambda r: (r["env"], r["mode"], r["seed"]))
    return rows


def curve_rows(loaded) -> list[dict]:
    groups = defaultdict(list)
    for rec, meta in loaded:
        groups[(rec.env, rec.mode)].append((rec, _settings(rec, meta)[2]))
    rows = []
    for (env, mode), members in sorted(groups.items()):
        steps = sorted(set.intersection(*(set(r.eval_steps) for r, _ in members)))
        raw, sm = [], []
        for rec, window in members:
            idx = {s: i for i, s in enumerate(rec.eval_steps)}
            sel = [idx[s] for s in steps]
            raw.append(np.asarray(rec.eval_returns)[sel])
            sm.append(smooth(rec.eval_returns, window)[sel])
        raw, sm = np.array(raw), np.array(sm)
        for j, step in enumerate(steps):
            rows.append({"env": env, "mode": mode, "step": step, "n_seeds": len(members),
                         "mean_return": float(raw[:, j].mean()), "mean_smoothed": float(sm[:, j].mean()),
                         "min_return": float(raw[:, j].min()), "max_return": float(raw[:, j].max())})
    return rows


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def curves_svg(rows, width: int = 640, height: int = 360) -> str:
    """Minimal line chart of the seed-mean smoothed return per (env, mode)."""
    pad_l, pad_r, pad_t, pad_b = 60, 150, 20, 40
    series = defaultdict(list)
    for r in rows:
        series[(r["env"], r["mode"])].append((r["step"], r["mean_smoothed"]))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">', '<rect width="100%" height="100%" fill="white"/>']
    if series:
        xs = np.array([p[0] for s in series.values() for p in s], dtype=float)
        ys = np.array([p[1] for s in series.values() for p in s], dtype=float)
        x0, x1 = xs.min(), max(xs.max(), xs.min() + 1)
        y0, y1 = ys.min(), ys.max()
        if y1 - y0 < 1e-12:
            y0, y1 = y0 - 1, y1 + 1
        pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

        def px(x, y):
            return pad_l + (x - x0) / (x1 - x0) * pw, pad_t + (1 - (y - y0) / (y1 - y0)) * ph

        bx, by = pad_l, pad_t + ph
        parts.append(f'<line x1="{bx}" y1="{by}" x2="{bx + pw}" y2="{by}" stroke="black"/>')
        parts.append(f'<line x1="{bx}" y1="{pad_t}" x2="{bx}" y2="{by}" stroke="black"/>')
        parts.append(f'<text x="{bx}" y="{by + 16}" font-size="11">{x0:g}</text>')
        parts.append(f'<text x="{bx + pw}" y="{by + 16}" font-size="11" text-anchor="end">{x1:g}</text>')
        parts.append(f'<text x="{bx + pw / 2}" y="{by + 32}" font-size="12" text-anchor="middle">env steps</text>')
        parts.append(f'<text x="{bx - 4}" y="{by}" font-size="11" text-anchor="end">{y0:.3g}</text>')
        parts.append(f'<text x="{bx - 4}" y="{pad_t + 10}" font-size="11" text-anchor="end">{y1:.3g}</text>')
        for i, ((env, mode), pts) in enumerate(sorted(series.items())):
            color = _COLORS[i % len(_COLORS)]
            coords = " ".join("{:.2f},{:.2f}".format(*px(x, y)) for x, y in sorted(pts))
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
            ly = pad_t + 14 * (i + 1)
            parts.append(f'<text x="{pad_l + pw + 8}" y="{ly}" font-size="11" fill="{color}">{env}/{mode}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report(record_paths, out_dir, svg: bool = True) -> dict:
    """Write ``metrics.csv``, ``curves.csv`` and optionally ``curves.svg``."""
    paths = sorted(Path(p) for p in record_paths)
    if not paths:
        raise FileNotFoundError("no record files to report on")
    loaded = [read_record(p) for p in paths]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = metric_rows(loaded)
    curves = curve_rows(loaded)
    written = {"metrics": write_csv(out / "metrics.csv", METRIC_COLUMNS, metrics),
               "curves": write_csv(out / "curves.csv", CURVE_COLUMNS, curves)}
    if svg:
        written["svg"] = out / "curves.svg"
        written["svg"].write_text(curves_svg(curves))
    return written
