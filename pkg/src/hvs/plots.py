"""PNG figures rendered from the result CSVs.

Only reads files written by the harness; nothing here feeds back into
results.  ``render_all`` draws whatever inputs are present in a directory.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import ResultTable, condition_means  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "hvs",
}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_method_comparison(table: ResultTable, path) -> Path:
    """Median homogeneous vs heterogeneous accuracy per condition."""
    qq = condition_means(table, "method_comparison", "M_qq")
    qg = condition_means(table, "method_comparison", "M_qg")
    conds = list(qq)
    x = np.arange(len(conds))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.4, 0.8 * len(conds)), 4.0))
        ax.bar(x - 0.2, [np.median(list(qq[c].values())) for c in conds], 0.4, label="M(q, q)")
        ax.bar(x + 0.2, [np.median(list(qg[c].values())) for c in conds], 0.4, label="M(q, g)")
        ax.set_xticks(x, conds, rotation=30, ha="right")
        ax.set_ylabel("accuracy (median over seeds)")
        ax.set_ylim(0, 1)
        ax.legend()
        return _save(fig, Path(path))


def plot_correlation(scatter_csv, path) -> Path:
    rows = _read_rows(Path(scatter_csv))
    hv = np.array([float(r["hom_vanilla"]) for r in rows])
    hb = np.array([float(r["hom_bct"]) for r in rows])
    xb = np.array([float(r["het_bct"]) for r in rows])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.6), sharey=True)
        for ax, x, label in ((axes[0], hv, "homogeneous (vanilla)"), (axes[1], hb, "homogeneous (BCT)")):
            ax.scatter(x, xb, s=12)
            if len(x) > 1 and np.ptp(x) > 0 and np.ptp(xb) > 0:
                ax.set_title(f"r = {np.corrcoef(x, xb)[0, 1]:.2f}")
            ax.set_xlabel(label)
        axes[0].set_ylabel("heterogeneous (BCT)")
        return _save(fig, Path(path))


def plot_reward_ablation(table: ResultTable, path) -> Path:
    means = condition_means(table, "reward_ablation", "M_qg")
    conds = list(means)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, c in enumerate(conds):
            vals = list(means[c].values())
            ax.bar(i, np.median(vals), 0.6, alpha=0.7)
            ax.plot([i] * len(vals), vals, "k.", ms=4)
        ax.set_xticks(range(len(conds)), conds)
        ax.set_ylabel("mean best-5 heterogeneous accuracy")
        return _save(fig, Path(path))


def plot_cost_curves(cost_csv, path) -> Path:
    rows = _read_rows(Path(cost_csv))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for arch in sorted({r["arch"] for r in rows}):
            pts = [(float(r["ratio"]), float(r["amortized_flops"])) for r in rows
                   if r["arch"] == arch and float(r["ratio"]) > 0]
            ax.plot(*zip(*pts), marker=".", label=arch)
        g = float(rows[0]["gallery_flops"])
        ax.axhline(g, color="k", lw=0.8, ls="--", label="gallery only")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("queries per indexed image")
        ax.set_ylabel("amortized flops per image")
        ax.legend(fontsize=7)
        return _save(fig, Path(path))


def render_all(results_dir) -> list[Path]:
    d = Path(results_dir)
    written = []
    if (d / "method_comparison.csv").exists():
        table = ResultTable.from_csv((d / "method_comparison.csv").read_text())
        written.append(plot_method_comparison(table, d / "method_comparison.png"))
    if (d / "correlation_scatter.csv").exists():
        written.append(plot_correlation(d / "correlation_scatter.csv", d / "correlation.png"))
    if (d / "reward_ablation.csv").exists():
        table = ResultTable.from_csv((d / "reward_ablation.csv").read_text())
        written.append(plot_reward_ablation(table, d / "reward_ablation.png"))
    if (d / "cost_curves.csv").exists():
        written.append(plot_cost_curves(d / "cost_curves.csv", d / "cost_curves.png"))
    return written
