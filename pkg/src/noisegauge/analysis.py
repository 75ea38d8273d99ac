"""Rater interpretability statistics and the sliced-Wasserstein sample metric.

Outputs are plain rows/CSV; figure rendering lives with the CLI so these
functions stay dependency-light and easily testable.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import ToyDataset
from .models import ParamVector, Rater
from .pipelines import RunContext, train_rater

Array = np.ndarray


def _average_ranks(v: Array) -> Array:
    """Ranks 1..n with ties sharing their average rank."""
    v = np.asarray(v, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    ranks[order] = np.arange(1, len(v) + 1)
    _, inverse, counts = np.unique(v, return_inverse=True, return_counts=True)
    sums = np.zeros(counts.shape)
    np.add.at(sums, inverse, ranks)
    return sums[inverse] / counts[inverse]


def spearman_flagged(xs: Array, ys: Array) -> tuple[float, bool]:
    """Rank correlation; a constant input yields (0.0, True) instead of NaN."""
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ValueError(f"length mismatch: {xs.shape} vs {ys.shape}")
    if xs.size < 2:
        raise ValueError("need at least two points")
    rx, ry = _average_ranks(xs), _average_ranks(ys)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0, True
    rho = float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))
    return rho, False


def spearman(xs: Array, ys: Array) -> float:
    return spearman_flagged(xs, ys)[0]


@dataclass(frozen=True)
class RaterStatRow:
    stage: str
    image_id: int
    t_norm: float
    spearman_rho: float
    score_std: float
    degenerate: bool


def rater_statistics(rater: Rater, eta: ParamVector, dataset: ToyDataset,
                     n_images: int, n_noise: int, t_grid: Array,
                     rng: np.random.Generator, stage: str = "0",
                     timesteps: int = 1000, workers: int = 1) -> list[RaterStatRow]:
    """Score-vs-norm correlation and score spread per (image, timestep) cell.

    For every sampled image, the same n_noise candidates are rated at each
    normalized timestep in t_grid; rows come back sorted by (t, image).
    """
    del timesteps  # t_grid is already normalized
    x0_pool, labels = dataset.train_arrays()
    n_classes = dataset.spec.n_classes
    replace = n_images > len(x0_pool)
    img_idx = rng.choice(len(x0_pool), size=n_images, replace=replace)
    x0 = x0_pool[img_idx]
    cond = labels[img_idx] if labels is not None else np.full(n_images, n_classes)
    cond = np.where(cond < 0, n_classes, cond)
    noises = rng.standard_normal((n_images, n_noise, dataset.spec.d))
    norms = np.linalg.norm(noises, axis=2)

    eps_flat = noises.reshape(n_images * n_noise, dataset.spec.d)
    x0_flat = np.repeat(x0, n_noise, axis=0)
    cond_flat = np.repeat(cond, n_noise)

    def one_timestep(t_norm: float) -> list[RaterStatRow]:
        t_flat = np.full(n_images * n_noise, t_norm)
        scores = rater.score_batch(eta, eps_flat, t_flat, x0_flat, cond_flat)
        scores = scores.reshape(n_images, n_noise)
        rows = []
        for i in range(n_images):
            rho, degenerate = spearman_flagged(scores[i], norms[i])
            rows.append(RaterStatRow(stage=stage, image_id=int(img_idx[i]),
                                     t_norm=float(t_norm), spearman_rho=rho,
                                     score_std=float(scores[i].std()),
                                     degenerate=degenerate))
        return rows

    t_values = [float(t) for t in t_grid]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one_timestep, t_values))
    else:
        chunks = [one_timestep(t) for t in t_values]
    out: list[RaterStatRow] = []
    for chunk in chunks:
        out.extend(chunk)
    return out


def stage_sweep(ctx: RunContext, stage_checkpoints: list[tuple[str, ParamVector]],
                rater_train_steps: int, n_images: int, n_noise: int, t_grid: Array,
                seed: int, workers: int = 1) -> dict[str, list[RaterStatRow]]:
    """Meta-train one rater per stage checkpoint, then collect its statistics.

    All stages share hyperparameters and seeds so the comparison isolates the
    checkpoint itself.
    """
    results: dict[str, list[RaterStatRow]] = {}
    for stage, theta in stage_checkpoints:
        eta, _ = train_rater(ctx, theta, seed=seed, outer_steps_override=rater_train_steps)
        stat_rng = np.random.default_rng(seed + 1)
        results[stage] = rater_statistics(ctx.rater, eta, ctx.dataset, n_images,
                                          n_noise, t_grid, stat_rng, stage=stage,
                                          workers=workers)
    return results


def _w2_1d(a_sorted: Array, b_sorted: Array) -> float:
    """Exact 2-Wasserstein distance between two 1-D empirical distributions."""
    n, m = len(a_sorted), len(b_sorted)
    if n == m:
        diff = a_sorted - b_sorted
        return float(np.sqrt(np.mean(diff * diff)))
    qa = np.arange(1, n + 1) / n
    qb = np.arange(1, m + 1) / m
    q = np.union1d(qa, qb)
    widths = np.diff(np.concatenate(([0.0], q)))
    ia = np.searchsorted(qa, q, side="left")
    ib = np.searchsorted(qb, q, side="left")
    diff = a_sorted[np.minimum(ia, n - 1)] - b_sorted[np.minimum(ib, m - 1)]
    return float(np.sqrt(np.sum(widths * diff * diff)))


def sliced_wasserstein(a: Array, b: Array, n_proj: int, rng: np.random.Generator) -> float:
    """Mean 1-D 2-Wasserstein distance over random unit projections."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("sample sets must be non-empty")
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if n_proj < 1:
        raise ValueError("need at least one projection")
    d = a.shape[1]
    dirs = rng.standard_normal((n_proj, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if len(a) == len(b):
        return float(np.mean(np.sqrt(np.mean((pa - pb) ** 2, axis=0))))
    return float(np.mean([_w2_1d(pa[:, j], pb[:, j]) for j in range(n_proj)]))


STATS_COLUMNS = ("stage", "image_id", "t", "rho", "std", "flag")


def write_stats_csv(rows: list[RaterStatRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_COLUMNS)
        for r in rows:
            writer.writerow([r.stage, r.image_id, repr(r.t_norm), repr(r.spearman_rho),
                             repr(r.score_std), int(r.degenerate)])


def read_stats_csv(path) -> list[RaterStatRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(RaterStatRow(stage=rec["stage"], image_id=int(rec["image_id"]),
                                     t_norm=float(rec["t"]), spearman_rho=float(rec["rho"]),
                                     score_std=float(rec["std"]),
                                     degenerate=bool(int(rec["flag"]))))
    return rows


def append_metric_csv(path, run: str, step: int, swd: float) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(("run", "step", "swd"))
        writer.writerow((run, step, repr(float(swd))))


def read_metric_csv(path) -> list[tuple[str, int, float]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append((rec["run"], int(rec["step"]), float(rec["swd"])))
    return rows
