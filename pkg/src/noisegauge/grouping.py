"""Grouped minibatches and the softmax-weighted training objective.

A group fixes one (x0, cond, t) triple and carries K independent noise draws.
Rater scores are normalized by a softmax inside each group, so the weights
encode only the relative standing of noise instances, never image content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .models import Denoiser, ParamVector, Rater, param_consts, param_leaves
from .diffusion import NoiseSchedule
from .tape import Var

Array = np.ndarray


@dataclass(frozen=True)
class GroupedBatch:
    """B groups of (x0, cond, t) sharing K fresh noises each."""

    x0: Array        # (B, d)
    cond_idx: Array  # (B,) int, null token encoded as n_classes
    t: Array         # (B,) int
    noises: Array    # (B, K, d)

    @property
    def n_groups(self) -> int:
        return self.x0.shape[0]

    @property
    def group_size(self) -> int:
        return self.noises.shape[1]

    def group(self, j: int) -> tuple:
        return self.x0[j], int(self.cond_idx[j]), int(self.t[j]), self.noises[j]


@dataclass(frozen=True)
class PlainBatch:
    """Ungrouped instances with one noise each, e.g. a validation batch."""

    x0: Array
    cond_idx: Array
    t: Array
    eps: Array


@dataclass(frozen=True)
class GroupWeights:
    w: Array

    def __post_init__(self):
        if not np.all(np.isfinite(self.w)):
            raise ValueError("group weights must be finite")


def sample_grouped_batch(x0_pool: Array, labels: Array | None, n_groups: int,
                         group_size: int, p_drop: float, sched: NoiseSchedule,
                         rng: np.random.Generator, n_classes: int = 0) -> GroupedBatch:
    """Draw B groups: sample index, per-group timestep, per-group condition
    dropout, then K i.i.d. standard-normal noises per group (in that rng order)."""
    n = x0_pool.shape[0]
    if n == 0:
        raise ValueError("empty sample pool")
    if group_size < 1:
        raise ValueError(f"group size must be >= 1, got {group_size}")
    if not (0.0 <= p_drop <= 1.0):
        raise ValueError(f"p_drop must be in [0, 1], got {p_drop}")
    idx = rng.integers(0, n, size=n_groups)
    t = rng.integers(0, sched.timesteps, size=n_groups)
    dropped = rng.random(n_groups) < p_drop
    if labels is None:
        cond = np.full(n_groups, n_classes)
    else:
        cond = np.where(dropped | (labels[idx] < 0), n_classes, labels[idx])
    noises = rng.standard_normal((n_groups, group_size, x0_pool.shape[1]))
    return GroupedBatch(x0=x0_pool[idx].copy(), cond_idx=cond.astype(int), t=t, noises=noises)


def sample_plain_batch(x0_pool: Array, labels: Array | None, n: int, p_drop: float,
                       sched: NoiseSchedule, rng: np.random.Generator,
                       n_classes: int = 0) -> PlainBatch:
    g = sample_grouped_batch(x0_pool, labels, n, 1, p_drop, sched, rng, n_classes)
    return PlainBatch(x0=g.x0, cond_idx=g.cond_idx, t=g.t, eps=g.noises[:, 0, :])


def group_weights(scores: Array) -> GroupWeights:
    """Softmax of one group's scores, computed with max subtraction."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    e = np.exp(s - s.max())
    return GroupWeights(e / e.sum())


def softmax_rows(scores: Var) -> Var:
    """Row-wise stable softmax as a graph op.

    A singleton row softmax is identically 1, so for K = 1 the result is a
    constant and no gradient flows into the scores.
    """
    if scores.shape[1] == 1:
        return Var(np.ones_like(scores.data))
    shift = Var(scores.data.max(axis=1, keepdims=True))  # detached stabilizer
    e = tape.exp(scores - shift)
    return e / e.sum(axis=1, keepdims=True)


def weighted_inner_loss_graph(denoiser: Denoiser, rater: Rater,
                              theta_vars: dict[str, Var], eta_vars: dict[str, Var],
                              batch: GroupedBatch, sched: NoiseSchedule) -> tuple[Var, Array]:
    """Mean over groups of sum_k w_k * ||eps_k - eps_hat_k||^2.

    Returns the scalar loss Var and the detached (B, K) weight matrix.
    """
    B, K, d = batch.noises.shape
    abar = sched.alpha_bars[batch.t]
    x_t = (np.sqrt(abar)[:, None, None] * batch.x0[:, None, :]
           + np.sqrt(1.0 - abar)[:, None, None] * batch.noises)
    t_norm = np.repeat(batch.t / sched.timesteps, K)
    cond = np.repeat(batch.cond_idx, K)
    eps_flat = batch.noises.reshape(B * K, d)
    x0_flat = np.repeat(batch.x0, K, axis=0)

    eps_hat = denoiser.forward_graph(theta_vars, x_t.reshape(B * K, d), t_norm, cond)
    resid = Var(eps_flat) - eps_hat
    per_instance = tape.vsum(resid * resid, axis=1).reshape(B, K)

    scores = rater.forward_graph(eta_vars, eps_flat, t_norm, x0_flat, cond).reshape(B, K)
    w = softmax_rows(scores)
    loss = tape.vsum(w * per_instance) / float(B)
    return loss, w.data.copy()


def mean_diffusion_loss_graph(denoiser: Denoiser, theta_vars: dict[str, Var],
                              batch: PlainBatch, sched: NoiseSchedule) -> Var:
    """Mean per-instance squared error on an ungrouped batch."""
    n, d = batch.eps.shape
    abar = sched.alpha_bars[batch.t]
    x_t = np.sqrt(abar)[:, None] * batch.x0 + np.sqrt(1.0 - abar)[:, None] * batch.eps
    eps_hat = denoiser.forward_graph(theta_vars, x_t, batch.t / sched.timesteps, batch.cond_idx)
    resid = Var(batch.eps) - eps_hat
    return tape.vsum(resid * resid) / float(n)


def weighted_inner_loss(denoiser: Denoiser, rater: Rater, theta: ParamVector,
                        eta: ParamVector, batch: GroupedBatch, sched: NoiseSchedule) -> float:
    loss, _ = weighted_inner_loss_graph(denoiser, rater, param_consts(theta),
                                        param_consts(eta), batch, sched)
    return loss.item()


def mean_diffusion_loss(denoiser: Denoiser, theta: ParamVector, batch: PlainBatch,
                        sched: NoiseSchedule) -> float:
    return mean_diffusion_loss_graph(denoiser, param_consts(theta), batch, sched).item()


def inner_loss_and_grad(denoiser: Denoiser, rater: Rater, theta: ParamVector,
                        eta: ParamVector, batch: GroupedBatch,
                        sched: NoiseSchedule) -> tuple[float, ParamVector, Array]:
    """Loss value, exact gradient w.r.t. theta, and the group weights."""
    theta_vars = param_leaves(theta)
    loss, w = weighted_inner_loss_graph(denoiser, rater, theta_vars,
                                        param_consts(eta), batch, sched)
    gs = tape.grad(loss, list(theta_vars.values()), create_graph=False)
    grad_pv = ParamVector.from_dict({k: g.data for k, g in zip(theta_vars, gs)},
                                    denoiser.layout())
    return loss.item(), grad_pv, w
