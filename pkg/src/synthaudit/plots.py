"""Figure rendering for compiled reports.

Draws PNGs next to the report's plot-data CSVs: ROC curves, the violence
calibration scatter, statistical-parity heatmaps, and demographic histogram
comparisons. Purely presentational; all numbers come from the report dict.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_report_figures(report: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    sections = report.get("sections", {})

    util = sections.get("utility")
    if util is not None:
        roc = util.get("protest", {}).get("roc")
        if roc:
            written.append(_roc_figure(roc, util["protest"].get("auc"), out_dir))
        scatter = util.get("violence", {}).get("scatter")
        if scatter:
            written.append(_violence_figure(util["violence"], out_dir))

    fair = sections.get("fairness")
    if fair is not None:
        for dim, outcomes in fair["matrices"].items():
            for outcome in ("protest", "violence"):
                if outcome in outcomes:
                    written.append(_spd_figure(dim, outcome, outcomes[outcome], out_dir))

    shift = sections.get("demographic_shift")
    if shift is not None:
        for dim, d in shift["dims"].items():
            written.append(_histogram_figure(dim, d, out_dir))
    return written


def _roc_figure(roc, auc, out_dir: Path) -> Path:
    pts = np.asarray(roc)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(pts[:, 0], pts[:, 1], drawstyle="steps-post")
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
    label = f"protest ROC (AUC={auc:.3f})" if auc is not None else "protest ROC"
    ax.set(xlabel="false positive rate", ylabel="true positive rate", title=label)
    path = out_dir / "fig_roc_protest.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def _violence_figure(violence: dict, out_dir: Path) -> Path:
    pts = np.asarray(violence["scatter"])
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(pts[:, 0], pts[:, 1], s=8, alpha=0.5)
    slope, intercept = violence.get("fit_slope"), violence.get("fit_intercept")
    if slope is not None:
        xs = np.linspace(0, 1, 2)
        ax.plot(xs, slope * xs + intercept, c="C1",
                label=f"fit (r={violence['pearson_r']:.3f})")
        ax.legend()
    ax.set(xlabel="violence label", ylabel="predicted violence",
           xlim=(0, 1), ylim=(0, 1), title="violence calibration")
    path = out_dir / "fig_violence_scatter.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def _spd_figure(dim: str, outcome: str, m: dict, out_dir: Path) -> Path:
    spd = np.asarray(m["spd"])
    groups = m["groups"]
    fig, ax = plt.subplots(figsize=(1 + 0.6 * len(groups), 1 + 0.6 * len(groups)))
    vmax = max(0.05, float(np.abs(spd).max()))
    im = ax.imshow(spd, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
    ax.set_xticks(range(len(groups)), groups, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(groups)), groups, fontsize=7)
    ax.set_title(f"SPD: {outcome} by {dim}", fontsize=9)
    fig.colorbar(im, ax=ax, shrink=0.8)
    path = out_dir / f"fig_spd_{dim}_{outcome}.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def _histogram_figure(dim: str, d: dict, out_dir: Path) -> Path:
    cats = d["categories"]
    x = np.arange(len(cats))
    fig, ax = plt.subplots(figsize=(1.5 + 0.5 * len(cats), 3))
    ax.bar(x - 0.2, d["real"], width=0.4, label="real")
    ax.bar(x + 0.2, d["synth"], width=0.4, label="synthetic")
    ax.set_xticks(x, cats, rotation=45, ha="right", fontsize=7)
    ax.set(ylabel="fraction", title=f"{dim} (TV={d['tv_distance']:.3f})")
    ax.legend(fontsize=8)
    path = out_dir / f"fig_hist_{dim}.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path
