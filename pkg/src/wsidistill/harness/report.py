"""Comma-separated metric tables and line plots.

Output is a pure function of the records: rows keep the given order, columns
are sorted unless listed explicitly, and PNGs carry no timestamp or software
tag, so equal inputs give identical bytes.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

X_KEYS = ("data_fraction", "epoch", "step", "shots")
SERIES_KEYS = ("series", "method", "config")
DEFAULT_COLUMNS = ("name", "metric", "value")


class ReportError(OSError):
    pass


def _columns(records: Sequence[dict], columns: Sequence[str] | None) -> list[str]:
    if columns is not None:
        return list(columns)
    if not records:
        return list(DEFAULT_COLUMNS)
    keys: set[str] = set()
    for r in records:
        keys.update(r)
    return sorted(keys)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return "" if v is None else str(v)


def write_table(records: Sequence[dict], path: str | Path, columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    cols = _columns(records, columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow([_fmt(r.get(c)) for c in cols])
    return path


def _numeric(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def pick_x_key(records: Sequence[dict]) -> str | None:
    for key in X_KEYS:
        if records and all(_numeric(r.get(key)) for r in records):
            return key
    return None


def plot_records(records: Sequence[dict], path: str | Path, x_key: str, metrics: Sequence[str] | None = None) -> Path:
    """One panel per metric, one line per series, x sorted ascending."""
    series_key = next((k for k in SERIES_KEYS if any(k in r for r in records)), None)
    if metrics is None:
        skip = {x_key, series_key, "seed"}
        metrics = sorted({k for r in records for k, v in r.items() if k not in skip and _numeric(v)})
    if not metrics:
        raise ReportError("no numeric metric to plot")
    groups: dict[str, list[dict]] = {}
    for r in records:
        groups.setdefault(str(r.get(series_key, "")) if series_key else "", []).append(r)

    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        for name in sorted(groups):
            pts = sorted((r[x_key], r[metric]) for r in groups[name] if _numeric(r.get(metric)))
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", label=name or metric)
        ax.set_xlabel(x_key)
        ax.set_ylabel(metric)
        ax.grid(True, alpha=0.3)
        if series_key:
            ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def emit_report(records: Iterable[dict], out_dir: str | Path, stem: str = "metrics",
                columns: Sequence[str] | None = None, x_key: str | None = None) -> list[Path]:
    """Write ``stem.csv`` and, when the records have a numeric x axis, ``stem.png``."""
    records = list(records)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [write_table(records, out / f"{stem}.csv", columns)]
        x = x_key or pick_x_key(records)
        if records and x is not None:
            written.append(plot_records(records, out / f"{stem}.png", x))
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc}") from exc
    return written
