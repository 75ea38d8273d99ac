"""Figure rendering for the CLI report path.

Consumes the CSV row formats produced by the analysis module and writes PNG
files next to them.  Kept separate so the analysis library itself never
touches matplotlib.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import RaterStatRow
from .pipelines import LossCurve, smooth_losses


def _stage_sort_key(stage: str):
    try:
        return (0, float(stage))
    except ValueError:
        return (1, stage)


def _grouped_violin(ax, groups: dict, ylabel: str):
    keys = sorted(groups, key=_stage_sort_key)
    data = [np.asarray(groups[k]) for k in keys]
    ax.violinplot(data, showmedians=True, widths=0.8)
    ax.set_xticks(range(1, len(keys) + 1))
    ax.set_xticklabels([str(k) for k in keys], rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)


def render_stats_figures(rows: list[RaterStatRow], out_dir) -> list[Path]:
    """Violin views of the per-cell statistics along the stage and timestep axes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_stage_rho, by_stage_std = defaultdict(list), defaultdict(list)
    by_t_rho, by_t_std = defaultdict(list), defaultdict(list)
    for r in rows:
        by_stage_rho[r.stage].append(r.spearman_rho)
        by_stage_std[r.stage].append(r.score_std)
        t_key = f"{r.t_norm:.2f}"
        by_t_rho[t_key].append(r.spearman_rho)
        by_t_std[t_key].append(r.score_std)
    paths = []
    panels = [
        ("rho_by_stage.png", by_stage_rho, "score-norm Spearman rho", "training stage"),
        ("std_by_stage.png", by_stage_std, "score standard deviation", "training stage"),
        ("rho_by_t.png", by_t_rho, "score-norm Spearman rho", "normalized timestep"),
        ("std_by_t.png", by_t_std, "score standard deviation", "normalized timestep"),
    ]
    for name, groups, ylabel, xlabel in panels:
        fig, ax = plt.subplots(figsize=(7, 4))
        _grouped_violin(ax, groups, ylabel)
        ax.set_xlabel(xlabel)
        fig.tight_layout()
        path = out_dir / name
        fig.savefig(path, dpi=130)
        plt.close(fig)
        paths.append(path)
    return paths


def render_metric_figure(metric_rows: list[tuple[str, int, float]], out_path) -> Path:
    """Sample-quality metric vs training step, one line per run label."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    by_run = defaultdict(list)
    for run, step, swd in metric_rows:
        by_run[run].append((step, swd))
    fig, ax = plt.subplots(figsize=(7, 4))
    for run in sorted(by_run):
        pts = sorted(by_run[run])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=run)
    ax.set_xlabel("training step")
    ax.set_ylabel("sliced Wasserstein distance")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def render_match_figure(curve: LossCurve, target: float, smooth_window: int,
                        matched_step: int | None, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(curve.steps, curve.losses, alpha=0.35, label="loss")
    ax.plot(curve.steps, smooth_losses(curve.losses, smooth_window),
            label=f"smoothed (w={smooth_window})")
    ax.axhline(target, color="k", linestyle="--", label=f"target {target:g}")
    if matched_step is not None:
        ax.axvline(matched_step, color="r", linestyle=":", label=f"match @ {matched_step}")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path
