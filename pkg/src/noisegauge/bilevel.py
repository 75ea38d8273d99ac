"""Inner-loop SGD, exact unrolled hypergradients, and their verification oracles.

The hypergradient of the validation loss with respect to the rater is taken
by reverse accumulation through every inner SGD update.  Because gradients
are graph nodes (see tape.py), the second-order pieces - Hessian-vector
products of the weighted loss and the mixed rater/model term - are picked up
by the same backward pass, with no truncation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tape
from .errors import NumericalAbort
from .diffusion import NoiseSchedule
from .grouping import (GroupedBatch, PlainBatch, inner_loss_and_grad,
                       mean_diffusion_loss, mean_diffusion_loss_graph,
                       weighted_inner_loss_graph)
from .models import Denoiser, ParamVector, Rater, param_leaves
from .tape import Var

Array = np.ndarray


@dataclass
class InnerTrajectory:
    """SGD snapshots theta^(0..S) plus everything needed to replay them."""

    theta_steps: list[ParamVector]
    batches: list[GroupedBatch]
    alpha: float
    losses: list[float] = field(default_factory=list)

    @property
    def final(self) -> ParamVector:
        return self.theta_steps[-1]


@dataclass
class MetaGradReport:
    grad_eta: ParamVector
    val_loss_before: float
    val_loss_after: float
    inner_losses: list[float]
    per_step_weights: list[Array]
    theta_final: ParamVector

    def to_dict(self) -> dict:
        return {
            "grad_eta_norm": float(np.linalg.norm(self.grad_eta.values)),
            "val_loss_before": self.val_loss_before,
            "val_loss_after": self.val_loss_after,
            "inner_losses": [float(v) for v in self.inner_losses],
            "per_step_weights": [w.tolist() for w in self.per_step_weights],
        }


def inner_loop(denoiser: Denoiser, rater: Rater, theta0: ParamVector, eta: ParamVector,
               batches: list[GroupedBatch], alpha: float,
               sched: NoiseSchedule) -> InnerTrajectory:
    """Plain SGD on the weighted loss; alpha = 0 leaves parameters untouched."""
    if len(batches) < 1:
        raise ValueError("at least one inner batch is required")
    if alpha < 0:
        raise ValueError(f"inner learning rate must be >= 0, got {alpha}")
    theta = theta0.copy()
    steps = [theta]
    losses = []
    for s, batch in enumerate(batches):
        loss, grad_pv, _ = inner_loss_and_grad(denoiser, rater, theta, eta, batch, sched)
        if not np.isfinite(loss):
            raise NumericalAbort("non-finite inner loss", step=s)
        losses.append(loss)
        theta = ParamVector(theta.values - alpha * grad_pv.values, theta.layout)
        steps.append(theta)
    return InnerTrajectory(theta_steps=steps, batches=list(batches), alpha=alpha,
                           losses=losses)


def _unroll_hypergradient(inner_loss_fn: Callable, val_loss_fn: Callable,
                          theta0: dict[str, Array], eta0: dict[str, Array],
                          alpha: float, n_steps: int):
    """Reverse-accumulate d val / d eta through n_steps SGD updates.

    inner_loss_fn(theta_vars, eta_vars, step) and val_loss_fn(theta_vars)
    build scalar graph nodes.  Returns (grad dict, theta_final dict,
    val_loss, inner_losses).
    """
    theta_vars = {k: tape.leaf(v) for k, v in theta0.items()}
    eta_vars = {k: tape.leaf(v) for k, v in eta0.items()}
    inner_losses = []
    for s in range(n_steps):
        loss = inner_loss_fn(theta_vars, eta_vars, s)
        if not np.isfinite(loss.data):
            raise NumericalAbort("non-finite inner loss during unrolling", step=s)
        inner_losses.append(loss.item())
        gs = tape.grad(loss, list(theta_vars.values()))
        theta_vars = {k: theta_vars[k] - alpha * g for k, g in zip(theta_vars, gs)}
    val = val_loss_fn(theta_vars)
    if not np.isfinite(val.data):
        raise NumericalAbort("non-finite validation loss after unrolling", step=n_steps)
    geta = tape.grad(val, list(eta_vars.values()), create_graph=False)
    grads = {k: g.data for k, g in zip(eta_vars, geta)}
    theta_final = {k: v.data for k, v in theta_vars.items()}
    return grads, theta_final, val.item(), inner_losses


def meta_gradient_unrolled(denoiser: Denoiser, rater: Rater, theta0: ParamVector,
                           eta: ParamVector, batches: list[GroupedBatch],
                           val_batch: PlainBatch, alpha: float,
                           sched: NoiseSchedule) -> MetaGradReport:
    """Exact gradient of the post-inner-loop validation loss w.r.t. the rater."""
    weights: list[Array] = []

    def inner_fn(theta_vars, eta_vars, s):
        loss, w = weighted_inner_loss_graph(denoiser, rater, theta_vars, eta_vars,
                                            batches[s], sched)
        weights.append(w)
        return loss

    def val_fn(theta_vars):
        return mean_diffusion_loss_graph(denoiser, theta_vars, val_batch, sched)

    val_before = mean_diffusion_loss(denoiser, theta0, val_batch, sched)
    grads, theta_final, val_after, inner_losses = _unroll_hypergradient(
        inner_fn, val_fn, theta0.as_dict(), eta.as_dict(), alpha, len(batches))
    return MetaGradReport(
        grad_eta=ParamVector.from_dict(grads, rater.layout()),
        val_loss_before=val_before,
        val_loss_after=val_after,
        inner_losses=inner_losses,
        per_step_weights=weights,
        theta_final=ParamVector.from_dict(theta_final, denoiser.layout()),
    )


def meta_gradient_fd(denoiser: Denoiser, rater: Rater, theta0: ParamVector,
                     eta: ParamVector, batches: list[GroupedBatch],
                     val_batch: PlainBatch, alpha: float, sched: NoiseSchedule,
                     h: float = 1e-5) -> ParamVector:
    """Central-difference hypergradient, replaying the same batches per coordinate."""
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")

    def objective(eta_values: Array) -> float:
        pv = ParamVector(eta_values, eta.layout)
        traj = inner_loop(denoiser, rater, theta0, pv, batches, alpha, sched)
        return mean_diffusion_loss(denoiser, traj.final, val_batch, sched)

    out = np.zeros(eta.size)
    for i in range(eta.size):
        up, down = eta.values.copy(), eta.values.copy()
        up[i] += h
        down[i] -= h
        out[i] = (objective(up) - objective(down)) / (2.0 * h)
    return ParamVector(out, eta.layout)


@dataclass(frozen=True)
class QuadraticFixture:
    """Strongly convex test problem whose hypergradient has a closed form.

    inner(theta; eta) = 1/2 theta' A theta - (M eta + c)' theta
    val(theta)        = 1/2 (theta - target)' V (theta - target)
    """

    a_mat: Array    # (p, p) SPD inner Hessian
    mix: Array      # (p, q) map from eta to the linear term
    offset: Array   # (p,)
    target: Array   # (p,) validation optimum
    v_mat: Array    # (p, p) SPD validation curvature

    def __post_init__(self):
        eigs = np.linalg.eigvalsh(self.a_mat)
        if eigs.min() <= 0:
            raise ValueError("inner Hessian must be positive definite")

    @property
    def mu(self) -> float:
        return float(np.linalg.eigvalsh(self.a_mat).min())

    @property
    def lambda_max(self) -> float:
        return float(np.linalg.eigvalsh(self.a_mat).max())

    def theta_star(self, eta: Array) -> Array:
        return np.linalg.solve(self.a_mat, self.mix @ eta + self.offset)

    def inner_loss(self, theta: Array, eta: Array) -> float:
        return float(0.5 * theta @ self.a_mat @ theta - (self.mix @ eta + self.offset) @ theta)

    def inner_grad(self, theta: Array, eta: Array) -> Array:
        return self.a_mat @ theta - (self.mix @ eta + self.offset)

    def val_loss(self, theta: Array) -> float:
        diff = theta - self.target
        return float(0.5 * diff @ self.v_mat @ diff)

    def val_grad(self, theta: Array) -> Array:
        return self.v_mat @ (theta - self.target)

    @classmethod
    def random(cls, seed: int, dim_theta: int = 8, dim_eta: int = 5,
               cond_max: float = 4.0) -> "QuadraticFixture":
        """Random SPD fixture with bounded condition number."""
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim_theta, dim_theta)))
        eigs = rng.uniform(1.0, cond_max, size=dim_theta)
        a = q @ np.diag(eigs) @ q.T
        a = 0.5 * (a + a.T)
        qv, _ = np.linalg.qr(rng.standard_normal((dim_theta, dim_theta)))
        v_eigs = rng.uniform(0.5, 2.0, size=dim_theta)
        v = qv @ np.diag(v_eigs) @ qv.T
        v = 0.5 * (v + v.T)
        return cls(a_mat=a, mix=rng.standard_normal((dim_theta, dim_eta)),
                   offset=rng.standard_normal(dim_theta),
                   target=rng.standard_normal(dim_theta), v_mat=v)


def implicit_meta_gradient(fixture: QuadraticFixture, eta: Array) -> Array:
    """Closed-form hypergradient via explicit inverse of the inner Hessian.

    With the linear term b(eta) = M eta + c, the mixed derivative of the inner
    gradient is -M, so the formula reduces to M' A^{-1} grad_val(theta*).
    """
    theta_star = fixture.theta_star(np.asarray(eta, dtype=np.float64))
    g_val = fixture.val_grad(theta_star)
    return fixture.mix.T @ np.linalg.solve(fixture.a_mat, g_val)


def unrolled_meta_gradient_quadratic(fixture: QuadraticFixture, eta: Array,
                                     theta0: Array, alpha: float, n_steps: int) -> Array:
    """Hypergradient of the fixture through the same generic unrolling engine."""
    a = Var(fixture.a_mat)
    m = Var(fixture.mix)
    c = Var(fixture.offset[:, None])
    v = Var(fixture.v_mat)
    tgt = Var(fixture.target[:, None])

    def inner_fn(theta_vars, eta_vars, s):
        th = theta_vars["theta"]
        b = tape.matmul(m, eta_vars["eta"]) + c
        return 0.5 * tape.vsum(th * tape.matmul(a, th)) - tape.vsum(b * th)

    def val_fn(theta_vars):
        diff = theta_vars["theta"] - tgt
        return 0.5 * tape.vsum(diff * tape.matmul(v, diff))

    grads, _, _, _ = _unroll_hypergradient(
        inner_fn, val_fn,
        {"theta": np.asarray(theta0, dtype=np.float64)[:, None]},
        {"eta": np.asarray(eta, dtype=np.float64)[:, None]},
        alpha, n_steps)
    return grads["eta"][:, 0]


def alignment_prediction(denoiser: Denoiser, rater: Rater, theta: ParamVector,
                         eta: ParamVector, batch: GroupedBatch, val_batch: PlainBatch,
                         alpha: float, sched: NoiseSchedule) -> float:
    """First-order predicted validation change for one weighted SGD step.

    The weights do not depend on theta, so the group-and-candidate sum of
    weighted gradient alignments equals the inner product of the validation
    gradient with the full weighted-loss gradient.
    """
    theta_vars = param_leaves(theta)
    val = mean_diffusion_loss_graph(denoiser, theta_vars, val_batch, sched)
    g_val = tape.grad(val, list(theta_vars.values()), create_graph=False)
    _, g_inner, _ = inner_loss_and_grad(denoiser, rater, theta, eta, batch, sched)
    g_val_flat = np.concatenate([g.data.reshape(-1) for g in g_val])
    return float(-alpha * np.dot(g_val_flat, g_inner.values))


def alignment_actual(denoiser: Denoiser, rater: Rater, theta: ParamVector,
                     eta: ParamVector, batch: GroupedBatch, val_batch: PlainBatch,
                     alpha: float, sched: NoiseSchedule) -> float:
    """Actual validation change after the same single weighted SGD step."""
    traj = inner_loop(denoiser, rater, theta, eta, [batch], alpha, sched)
    before = mean_diffusion_loss(denoiser, theta, val_batch, sched)
    after = mean_diffusion_loss(denoiser, traj.final, val_batch, sched)
    return after - before
