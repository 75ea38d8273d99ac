"""Training pipelines: pretraining, rater meta-training, selection training,
norm baselines, and loss-curve checkpoint matching.

All stages share one step implementation parameterized by a candidate pool
and a scorer, so the reduction identities (singleton pool == vanilla, norm
scorer == naive baseline) hold bitwise under a shared rng stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tape
from .bilevel import meta_gradient_unrolled
from .config import config_hash
from .datasets import ToyDataset, ToyDatasetSpec, generate
from .diffusion import NoiseSchedule, build_schedule
from .errors import NumericalAbort
from .grouping import (PlainBatch, mean_diffusion_loss_graph, sample_grouped_batch,
                       sample_plain_batch)
from .models import (Denoiser, DenoiserArch, ParamVector, Rater, RaterArch,
                     param_leaves)
from .optim import Adam, clip_by_norm

Array = np.ndarray

Scorer = Callable[[Array, Array, Array, Array], Array]


@dataclass
class LossCurve:
    """Per-step training loss log; steps strictly increasing."""

    steps: Array
    losses: Array

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=int)
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if len(self.steps) != len(self.losses):
            raise ValueError("steps and losses lengths differ")
        if len(self.steps) > 1 and not np.all(np.diff(self.steps) > 0):
            raise ValueError("steps must be strictly increasing")


@dataclass
class RunContext:
    """Shared objects derived from one config."""

    cfg: dict
    dataset: ToyDataset
    sched: NoiseSchedule
    denoiser: Denoiser
    rater: Rater

    @property
    def n_classes(self) -> int:
        return self.dataset.spec.n_classes


def dataset_from_config(cfg: dict) -> ToyDataset:
    data = cfg["data"]
    spec = ToyDatasetSpec(kind=data["kind"], d=data["d"], n_classes=data["n_classes"],
                          n_samples=data["n_samples"], seed=cfg["seeds"]["data_seed"])
    return generate(spec)


def build_context(cfg: dict, dataset: ToyDataset | None = None) -> RunContext:
    if dataset is None:
        dataset = dataset_from_config(cfg)
    sched = build_schedule(cfg["schedule"]["timesteps"], cfg["schedule"]["beta_start"],
                           cfg["schedule"]["beta_end"])
    model = cfg["model"]
    darch = DenoiserArch(d=dataset.spec.d, n_classes=dataset.spec.n_classes,
                         t_emb_dim=model["t_emb_dim"], c_emb_dim=model["c_emb_dim"],
                         hidden=tuple(model["denoiser_hidden"]))
    rarch = RaterArch(d=dataset.spec.d, n_classes=dataset.spec.n_classes,
                      t_emb_dim=model["t_emb_dim"], c_emb_dim=model["c_emb_dim"],
                      hidden=tuple(model["rater_hidden"]))
    return RunContext(cfg=cfg, dataset=dataset, sched=sched,
                      denoiser=Denoiser(darch), rater=Rater(rarch))


def rater_scorer(rater: Rater, eta: ParamVector, timesteps: int) -> Scorer:
    def score(cands: Array, x0: Array, t: Array, cond: Array) -> Array:
        B, K, d = cands.shape
        t_norm = np.repeat(t / timesteps, K)
        flat = rater.score_batch(eta, cands.reshape(B * K, d), t_norm,
                                 np.repeat(x0, K, axis=0), np.repeat(cond, K))
        return flat.reshape(B, K)
    return score


def norm_scorer(mode: str) -> Scorer:
    if mode not in ("min", "max"):
        raise ValueError(f"naive mode must be 'min' or 'max', got {mode!r}")
    sign = 1.0 if mode == "max" else -1.0

    def score(cands: Array, x0: Array, t: Array, cond: Array) -> Array:
        return sign * np.linalg.norm(cands, axis=2)
    return score


def train_denoiser(ctx: RunContext, theta0: ParamVector, steps: int, lr: float,
                   seed: int, pool_size: int = 1, scorer: Scorer | None = None,
                   eval_every: int | None = None,
                   checkpoint_cb: Callable[[int, ParamVector], None] | None = None,
                   ) -> tuple[ParamVector, LossCurve]:
    """Diffusion training with per-instance candidate noise selection.

    Each step draws a (B, pool_size, d) candidate block; with pool_size 1 the
    block is used as-is, otherwise the scorer picks the top-scoring candidate
    per instance (ties to the lowest index).  Scoring consumes no rng, so a
    singleton pool reproduces vanilla training bitwise.
    """
    if pool_size > 1 and scorer is None:
        raise ValueError("a scorer is required when pool_size > 1")
    cfg = ctx.cfg
    sched = ctx.sched
    pool_x0, pool_labels = ctx.dataset.train_arrays()
    n = pool_x0.shape[0]
    d = ctx.denoiser.arch.d
    batch_size = cfg["training"]["batch_size"]
    p_drop = cfg["training"]["p_drop"]
    n_classes = ctx.n_classes
    rng = np.random.default_rng(seed)
    adam = Adam(theta0.size, lr)
    theta = theta0.copy()
    step_log, loss_log = [], []
    if checkpoint_cb is not None:
        checkpoint_cb(0, theta)
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, size=batch_size)
        t = rng.integers(0, sched.timesteps, size=batch_size)
        dropped = rng.random(batch_size) < p_drop
        if pool_labels is None:
            cond = np.full(batch_size, n_classes)
        else:
            cond = np.where(dropped | (pool_labels[idx] < 0), n_classes, pool_labels[idx])
        x0 = pool_x0[idx]
        cands = rng.standard_normal((batch_size, pool_size, d))
        if pool_size == 1:
            eps = cands[:, 0, :]
        else:
            scores = scorer(cands, x0, t, cond)
            eps = cands[np.arange(batch_size), np.argmax(scores, axis=1)]
        batch = PlainBatch(x0=x0, cond_idx=cond.astype(int), t=t, eps=eps)
        theta_vars = param_leaves(theta)
        loss = mean_diffusion_loss_graph(ctx.denoiser, theta_vars, batch, sched)
        if not np.isfinite(loss.data):
            raise NumericalAbort("non-finite training loss", step=step)
        gs = tape.grad(loss, list(theta_vars.values()), create_graph=False)
        grad_flat = np.concatenate([g.data.reshape(-1) for g in gs])
        theta = ParamVector(adam.step(theta.values, grad_flat), theta.layout)
        step_log.append(step)
        loss_log.append(loss.item())
        if checkpoint_cb is not None and eval_every and step % eval_every == 0:
            checkpoint_cb(step, theta)
    if checkpoint_cb is not None and (not eval_every or steps % eval_every != 0):
        checkpoint_cb(steps, theta)
    return theta, LossCurve(np.asarray(step_log), np.asarray(loss_log))


def pretrain(ctx: RunContext, seed_override: int | None = None,
             steps_override: int | None = None,
             checkpoint_cb=None) -> tuple[ParamVector, LossCurve]:
    """Standard diffusion training with uniform i.i.d. noise."""
    cfg = ctx.cfg
    theta0 = ctx.denoiser.init_params(cfg["seeds"]["init_seed"])
    seed = cfg["seeds"]["train_seed"] if seed_override is None else seed_override
    steps = cfg["training"]["pretrain_steps"] if steps_override is None else steps_override
    return train_denoiser(ctx, theta0, steps, cfg["training"]["lr"], seed,
                          eval_every=cfg["training"]["eval_every"],
                          checkpoint_cb=checkpoint_cb)


def train_with_selection(ctx: RunContext, theta: ParamVector, eta: ParamVector,
                         seed: int, steps_override: int | None = None,
                         pool_size_override: int | None = None,
                         checkpoint_cb=None) -> tuple[ParamVector, LossCurve]:
    """Resume diffusion training on the argmax-scored noise per instance; the rater stays frozen."""
    cfg = ctx.cfg
    pool = cfg["selection"]["pool_size"] if pool_size_override is None else pool_size_override
    steps = cfg["training"]["select_steps"] if steps_override is None else steps_override
    scorer = rater_scorer(ctx.rater, eta, ctx.sched.timesteps)
    return train_denoiser(ctx, theta, steps, cfg["training"]["lr"], seed,
                          pool_size=pool, scorer=scorer,
                          eval_every=cfg["training"]["eval_every"],
                          checkpoint_cb=checkpoint_cb)


def train_naive(ctx: RunContext, theta: ParamVector, mode: str, seed: int,
                steps_override: int | None = None,
                pool_size_override: int | None = None,
                checkpoint_cb=None) -> tuple[ParamVector, LossCurve]:
    """Selection training with the scorer replaced by +-||eps||."""
    cfg = ctx.cfg
    pool = cfg["selection"]["pool_size"] if pool_size_override is None else pool_size_override
    steps = cfg["training"]["select_steps"] if steps_override is None else steps_override
    return train_denoiser(ctx, theta, steps, cfg["training"]["lr"], seed,
                          pool_size=pool, scorer=norm_scorer(mode),
                          eval_every=cfg["training"]["eval_every"],
                          checkpoint_cb=checkpoint_cb)


def train_vanilla(ctx: RunContext, theta: ParamVector, seed: int,
                  steps_override: int | None = None,
                  checkpoint_cb=None) -> tuple[ParamVector, LossCurve]:
    """Continue standard training from a checkpoint (the no-selection baseline)."""
    cfg = ctx.cfg
    steps = cfg["training"]["select_steps"] if steps_override is None else steps_override
    return train_denoiser(ctx, theta, steps, cfg["training"]["lr"], seed,
                          eval_every=cfg["training"]["eval_every"],
                          checkpoint_cb=checkpoint_cb)


@dataclass
class MetaTrainLog:
    steps: Array
    val_before: Array
    val_after: Array
    grad_norms: Array


def train_rater(ctx: RunContext, theta_frozen: ParamVector, seed: int,
                outer_steps_override: int | None = None,
                eta0: ParamVector | None = None) -> tuple[ParamVector, MetaTrainLog]:
    """Meta-train the rater on top of a frozen checkpoint.

    Each outer step runs S inner SGD steps from the working copy of theta,
    backpropagates the held-out loss through the unrolled updates, clips, and
    applies the meta-optimizer.  Every `refresh_every` outer steps the working
    copy is reset to the frozen checkpoint to keep the inner model from
    drifting away from it.
    """
    cfg = ctx.cfg
    meta = cfg["meta"]
    outer_steps = meta["outer_steps"] if outer_steps_override is None else outer_steps_override
    sched = ctx.sched
    train_x0, train_labels = ctx.dataset.train_arrays()
    val_x0, val_labels = ctx.dataset.val_arrays()
    p_drop = cfg["training"]["p_drop"]
    n_classes = ctx.n_classes
    rng = np.random.default_rng(seed)
    eta = (eta0 if eta0 is not None else ctx.rater.init_params(cfg["seeds"]["init_seed"] + 1)).copy()
    adam = Adam(eta.size, meta["outer_lr"])
    theta_work = theta_frozen.copy()
    steps_log, before_log, after_log, norm_log = [], [], [], []
    for outer in range(1, outer_steps + 1):
        if (outer - 1) % meta["refresh_every"] == 0:
            theta_work = theta_frozen.copy()
        batches = [
            sample_grouped_batch(train_x0, train_labels, meta["inner_batch_size"],
                                 meta["group_size"], p_drop, sched, rng, n_classes)
            for _ in range(meta["inner_steps"])
        ]
        val_batch = sample_plain_batch(val_x0, val_labels, meta["val_batch_size"],
                                       p_drop, sched, rng, n_classes)
        try:
            report = meta_gradient_unrolled(ctx.denoiser, ctx.rater, theta_work, eta,
                                            batches, val_batch, meta["inner_lr"], sched)
        except NumericalAbort as exc:
            raise NumericalAbort("non-finite meta-gradient", step=outer) from exc
        if not np.all(np.isfinite(report.grad_eta.values)):
            raise NumericalAbort("non-finite meta-gradient", step=outer)
        clipped = clip_by_norm(report.grad_eta.values, meta["grad_clip"])
        eta = ParamVector(adam.step(eta.values, clipped), eta.layout)
        theta_work = report.theta_final
        steps_log.append(outer)
        before_log.append(report.val_loss_before)
        after_log.append(report.val_loss_after)
        norm_log.append(float(np.linalg.norm(report.grad_eta.values)))
    return eta, MetaTrainLog(np.asarray(steps_log), np.asarray(before_log),
                             np.asarray(after_log), np.asarray(norm_log))


def smooth_losses(losses: Array, window: int) -> Array:
    """Centered rolling mean with truncated edges (window 1 is the identity)."""
    losses = np.asarray(losses, dtype=np.float64)
    if window <= 1:
        return losses.copy()
    half_lo = (window - 1) // 2
    half_hi = window // 2
    cums = np.concatenate([[0.0], np.cumsum(losses)])
    i = np.arange(len(losses))
    lo = np.maximum(0, i - half_lo)
    hi = np.minimum(len(losses), i + half_hi + 1)
    return (cums[hi] - cums[lo]) / (hi - lo)


def match_checkpoint(curve: LossCurve, target: float, smooth_window: int = 500,
                     stability_window: int = 1000) -> int | None:
    """First logged step whose smoothed loss stays at or below the target.

    The sustained-crossing condition requires the smoothed loss to satisfy
    smoothed <= target at every logged entry in the index window [i, i + W],
    where W = stability_window counts logged steps.  Returns the step value,
    or None when no window qualifies.
    """
    if len(curve.steps) == 0:
        raise ValueError("empty loss curve")
    W = int(stability_window)
    if len(curve.steps) <= W:
        raise ValueError(f"curve has {len(curve.steps)} entries; "
                         f"stability window {W} needs at least {W + 1}")
    ok = smooth_losses(curve.losses, smooth_window) <= target
    span = W + 1
    counts = np.concatenate([[0], np.cumsum(ok)])
    hits = np.nonzero(counts[span:] - counts[:-span] == span)[0]
    if len(hits) == 0:
        return None
    return int(curve.steps[hits[0]])
