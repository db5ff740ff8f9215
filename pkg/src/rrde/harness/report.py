"""Summary tables, plot data and figures for a finished result table.

Files written by :func:`emit_report` (all CSV with a header row):

- ``results.csv``: every row, columns ``model, ensemble_size, gem, metric, split, seed, value``
- ``summary.csv``: ``model, ensemble_size, gem, metric, split, mean, sd, count`` per cell,
  followed by published reference rows (``model = reference``)
- ``plotdata_fig2.csv``: vote accuracy against ensemble size
- ``plotdata_fig3.csv``: face-level RMSE against ensemble size, with the single-network baseline
- ``plotdata_fig4.csv``: group-level RMSE against ensemble size per GEM, with the baseline
- ``fig2.png``, ``fig3.png``, ``fig4.png`` rendering the three plot-data files
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

from .experiment import BASELINE, FACE, RRDE, VOTE, ResultTable

# published numbers reproduced in every summary for comparison
REFERENCE_BASELINE_RMSE = 0.78
REFERENCE_BEST_RMSE = 0.55
REFERENCE_BEST_GRID_CELL_RMSE = 0.5479
REFERENCE_ROWS = (
    ("reference", "", "challenge_baseline", "rmse", "validation", REFERENCE_BASELINE_RMSE),
    ("reference", 5, "best_rrde", "rmse", "validation", REFERENCE_BEST_RMSE),
    ("reference", "", "best_grid_cell", "rmse", "validation", REFERENCE_BEST_GRID_CELL_RMSE),
)
SUMMARY_FIELDS = ("model", "ensemble_size", "gem", "metric", "split", "mean", "sd", "count")
PLOT_FIELDS = ("series", "ensemble_size", "mean", "sd", "count")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def summary_rows(table: ResultTable) -> list:
    rows = [list(c) for c in table.cells()]
    rows.extend([*ref, "", ""] for ref in REFERENCE_ROWS)
    return rows


def plot_series(table: ResultTable) -> dict:
    """``{figure: [(series, ensemble_size, mean, sd, count), ...]}``."""
    cells = table.cells()
    fig2, fig3, fig4 = [], [], []
    for model, n, gem, metric, _split, mean, sd, count in cells:
        if model == RRDE and gem == VOTE and metric == "accuracy":
            fig2.append(("rrde_vote", n, mean, sd, count))
        elif gem == FACE and metric == "rmse":
            fig3.append((model, n, mean, sd, count))
        elif metric == "rmse" and gem != VOTE:
            if model == RRDE:
                fig4.append((f"rrde_{gem}", n, mean, sd, count))
            elif model == BASELINE and gem == "mean_encoding":
                fig4.append((f"{BASELINE}_{gem}", n, mean, sd, count))
    return {"fig2": fig2, "fig3": fig3, "fig4": fig4}


_TITLES = {
    "fig2": ("ensemble size", "vote accuracy", "Majority-vote accuracy"),
    "fig3": ("ensemble size", "face-level RMSE", "Individual happiness estimation"),
    "fig4": ("ensemble size", "group-level RMSE", "Group happiness estimation"),
}


def _plot(name, series_rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xlabel, ylabel, title = _TITLES[name]
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    by_series: dict = {}
    for s, n, mean, sd, _ in series_rows:
        by_series.setdefault(s, []).append((n, mean, sd))
    sizes = sorted({n for _, n, *_ in series_rows})
    for s, pts in by_series.items():
        pts.sort()
        xs, ys, es = zip(*pts)
        if s.startswith(BASELINE) and len(pts) == 1:
            # the single network has no ensemble size; draw it as a level
            ax.axhline(ys[0], ls="--", color="grey", label=s)
        else:
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=s)
    ax.set_xticks(sizes)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def emit_report(table: ResultTable, out_dir, figures: bool = True) -> list:
    """Write the report files under ``out_dir`` and return their paths."""
    if not table.rows:
        raise ValueError("cannot report an empty result table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out_dir / name
        path.write_text(text)
        written.append(path)

    put("results.csv", table.to_csv())
    put("summary.csv", _csv(SUMMARY_FIELDS, summary_rows(table)))
    series = plot_series(table)
    for name, rows in series.items():
        put(f"plotdata_{name}.csv", _csv(PLOT_FIELDS, rows))
    if figures:
        for name, rows in series.items():
            if rows:
                path = out_dir / f"{name}.png"
                _plot(name, rows, path)
                written.append(path)
    return written
