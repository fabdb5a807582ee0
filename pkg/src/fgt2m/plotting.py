"""Metric-log merging and SVG line charts."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InputError  # noqa: E402


def merge_logs(paths) -> list[dict]:
    """Rows of every CSV log, tagged with a ``run`` column taken from the file's parent directory."""
    rows = []
    for path in map(Path, paths):
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or "iteration" not in reader.fieldnames:
                raise InputError(f"{path}: not a metric log (no iteration column)")
            run = path.parent.name or path.stem
            rows += [{"run": run, **row} for row in reader]
    return rows


def write_svg_charts(rows, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    metrics = [k for k in (rows[0] if rows else {}) if k not in ("run", "iteration")]
    written = []
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        plotted = False
        for run in dict.fromkeys(r["run"] for r in rows):
            pts = [(float(r["iteration"]), float(r[metric])) for r in rows
                   if r["run"] == run and r.get(metric) not in (None, "")]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o" if len(pts) < 3 else None, label=run)
                plotted = True
        if not plotted:
            plt.close(fig)
            continue
        ax.set_xlabel("iteration")
        ax.set_ylabel(metric)
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = out_dir / f"{metric}.svg"
        tmp = path.with_name(f".{path.name}.tmp")
        fig.savefig(tmp, format="svg")
        plt.close(fig)
        tmp.replace(path)
        written.append(path)
    return written
