"""Figure rendering for experiment output directories.

Every run writes delimited data plus a standalone plot script; when
matplotlib is importable the figures are also rendered to PNG right away.
The renderers are schema-aware for the CSVs this package emits and fall back
to a generic first-column-vs-rest line plot for anything else.
"""

from __future__ import annotations

import csv
import os
from typing import Dict, List

__all__ = ["render_all", "emit_plot_script", "PLOT_SCRIPT"]


def _read_csv(path: str) -> Dict[str, list]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if len(rows) < 2:
        return {}
    header = rows[0]
    cols = {name: [] for name in header}
    for row in rows[1:]:
        for name, cell in zip(header, row):
            try:
                cols[name].append(float(cell))
            except ValueError:
                cols[name].append(cell)
    return cols


def _ensure_matplotlib():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_all(out_dir: str) -> List[str]:
    """Render one PNG per recognized CSV in `out_dir`; returns written paths."""
    try:
        plt = _ensure_matplotlib()
    except ImportError:
        return []
    written = []
    for name in sorted(os.listdir(out_dir)):
        if not name.endswith(".csv"):
            continue
        path = os.path.join(out_dir, name)
        cols = _read_csv(path)
        if not cols:
            continue
        fig = _render_one(plt, name, cols)
        if fig is None:
            continue
        png = path[:-4] + ".png"
        fig.savefig(png, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(png)
    return written


def _render_one(plt, name: str, cols: Dict[str, list]):
    keys = list(cols)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    try:
        if {"path_id", "t", "x"} <= set(keys):
            ids = sorted(set(cols["path_id"]))
            for pid in ids[:24]:
                ts = [t for t, p in zip(cols["t"], cols["path_id"]) if p == pid]
                xs = [x for x, p in zip(cols["x"], cols["path_id"]) if p == pid]
                ax.plot(ts, xs, lw=0.7)
            ax.set_xlabel("t")
            ax.set_ylabel("x")
        elif {"t", "x"} <= set(keys):
            ax.plot(cols["t"], cols["x"], lw=0.9)
            ax.set_xlabel("t")
            ax.set_ylabel("x")
        elif {"eps", "estimate"} <= set(keys):
            err = cols.get("stderr")
            if err and all(isinstance(e, float) for e in err):
                ax.errorbar(cols["eps"], cols["estimate"], yerr=err, fmt="o-")
            else:
                ax.plot(cols["eps"], cols["estimate"], "o-")
            ax.set_xscale("log")
            ax.set_xlabel("eps")
            ax.set_ylabel("estimate")
        elif {"model", "residual"} <= set(keys):
            models = sorted(set(cols["model"]))
            data = [
                [r for r, mm in zip(cols["residual"], cols["model"]) if mm == m]
                for m in models
            ]
            ax.boxplot(data, tick_labels=models)
            ax.set_ylabel("replication residual")
        elif {"m", "rel_err"} <= set(keys):
            ok = [(m, e) for m, e in zip(cols["m"], cols["rel_err"])
                  if isinstance(e, float) and e > 0]
            if ok:
                ax.loglog([m for m, _ in ok], [e for _, e in ok], "o-")
            ax.set_xlabel("paths")
            ax.set_ylabel("relative error")
        elif {"dt", "mean_R"} <= set(keys):
            ax.loglog(cols["dt"], [abs(v) for v in cols["mean_R"]], "o-")
            ax.set_xlabel("dt")
            ax.set_ylabel("|mean residual|")
        else:
            xkey = keys[0]
            plotted = False
            for k in keys[1:]:
                if all(isinstance(v, float) for v in cols[k]):
                    ax.plot(cols[xkey], cols[k], label=k, lw=0.9)
                    plotted = True
            if not plotted:
                plt.close(fig)
                return None
            ax.legend(fontsize=8)
            ax.set_xlabel(xkey)
        ax.set_title(name)
        ax.grid(True, alpha=0.3)
        return fig
    except Exception:
        plt.close(fig)
        return None


PLOT_SCRIPT = '''#!/usr/bin/env python
"""Standalone figure renderer for the CSV files written next to it."""
import csv
import os
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        return {}
    cols = {h: [] for h in rows[0]}
    for row in rows[1:]:
        for h, cell in zip(rows[0], row):
            try:
                cols[h].append(float(cell))
            except ValueError:
                cols[h].append(cell)
    return cols


def main(directory="."):
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".csv"):
            continue
        cols = read(os.path.join(directory, name))
        if not cols:
            continue
        keys = list(cols)
        fig, ax = plt.subplots(figsize=(6, 4))
        xkey = keys[0]
        plotted = 0
        for k in keys[1:]:
            if all(isinstance(v, float) for v in cols[k]):
                ax.plot(cols[xkey], cols[k], label=k, lw=0.9)
                plotted += 1
        if not plotted:
            plt.close(fig)
            continue
        ax.set_xlabel(xkey)
        ax.set_title(name)
        ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
        fig.savefig(os.path.join(directory, name[:-4] + ".png"),
                    dpi=120, bbox_inches="tight")
        plt.close(fig)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else os.path.dirname(os.path.abspath(__file__)) or ".")
'''


def emit_plot_script(out_dir: str) -> str:
    path = os.path.join(out_dir, "plot.py")
    with open(path, "w") as fh:
        fh.write(PLOT_SCRIPT)
    return path
