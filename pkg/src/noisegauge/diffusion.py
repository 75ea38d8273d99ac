"""Forward noising process, diffusion loss, guidance, and DDIM sampling.

Everything operates on flat vectors of configurable dimension; the networks
receive the timestep normalized to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule: betas in (0,1) with derived alphas and their cumulative product."""

    betas: Array
    alphas: Array
    alpha_bars: Array

    @property
    def timesteps(self) -> int:
        return len(self.betas)


@dataclass(frozen=True)
class Sample:
    x0: Array
    label: int | None = None


@dataclass(frozen=True)
class CondToken:
    """Class condition; value None is the null token used for unconditional prediction."""

    value: int | None = None

    @classmethod
    def draw(cls, label: int | None, p_drop: float, rng: np.random.Generator) -> "CondToken":
        if label is None or rng.random() < p_drop:
            return cls(None)
        return cls(int(label))

    def index(self, n_classes: int) -> int:
        # the embedding table keeps the null token in its last row
        return n_classes if self.value is None else int(self.value)


def build_schedule(timesteps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, timesteps)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def q_sample(x0: Array, t, eps: Array, sched: NoiseSchedule) -> Array:
    """Noisy marginal sample sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    Accepts a single vector or a batch; t may be a scalar or per-row array.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    abar = sched.alpha_bars[np.asarray(t)]
    if x0.ndim > np.ndim(abar):
        abar = np.expand_dims(abar, -1)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def scale_for(t, sched: NoiseSchedule) -> tuple[Array, Array]:
    """(sqrt(abar_t), sqrt(1 - abar_t)) for precomputed mixing."""
    abar = sched.alpha_bars[np.asarray(t)]
    return np.sqrt(abar), np.sqrt(1.0 - abar)


def diffusion_loss(denoiser, theta, x0: Array, t: int, eps: Array,
                   cond: CondToken, sched: NoiseSchedule) -> float:
    """Squared error ||eps - eps_hat||^2 for one instance (sum over components)."""
    x_t = q_sample(x0, t, eps, sched)
    t_norm = float(t) / sched.timesteps
    eps_hat = denoiser.forward_batch(
        theta,
        x_t[None, :],
        np.array([t_norm]),
        np.array([cond.index(denoiser.arch.n_classes)]),
    )[0]
    diff = eps - eps_hat
    return float(np.dot(diff, diff))


def cfg_predict(denoiser, theta, x_t: Array, t_norm: float, label: int, scale: float) -> Array:
    """Classifier-free guided prediction eps_u + scale * (eps_c - eps_u)."""
    n_classes = denoiser.arch.n_classes
    xb = np.asarray(x_t, dtype=np.float64)[None, :]
    tb = np.array([t_norm])
    eps_c = denoiser.forward_batch(theta, xb, tb, np.array([int(label)]))[0]
    eps_u = denoiser.forward_batch(theta, xb, tb, np.array([n_classes]))[0]
    return eps_u + scale * (eps_c - eps_u)


def ddim_timesteps(timesteps: int, n_steps: int) -> Array:
    """Evenly strided increasing subsequence of {0..T-1} ending at T-1."""
    if not (1 <= n_steps <= timesteps):
        raise ValueError(f"n_steps must be in [1, {timesteps}], got {n_steps}")
    return np.unique(np.round(np.linspace(0, timesteps - 1, n_steps)).astype(int))


def ddim_sample(denoiser, theta, sched: NoiseSchedule, n_steps: int, eta: float,
                rng: np.random.Generator, cond: CondToken = CondToken(None),
                cfg_scale: float | None = None, n_samples: int = 1,
                cond_indices: Array | None = None) -> Array:
    """Generate samples with the strided non-Markovian sampler.

    eta = 0 is fully deterministic given the initial noise; eta in (0, 1]
    re-injects the corresponding share of stochasticity.  Conditioning is a
    shared CondToken or a per-sample index array.  Returns (n_samples, d).
    """
    if not (0.0 <= eta <= 1.0):
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    taus = ddim_timesteps(sched.timesteps, n_steps)
    d = denoiser.arch.d
    n_classes = denoiser.arch.n_classes
    x = rng.standard_normal((n_samples, d))
    if cond_indices is not None:
        c_idx = np.asarray(cond_indices, dtype=int)
    else:
        c_idx = np.full(n_samples, cond.index(n_classes))
    null_idx = np.full(n_samples, n_classes)
    guided = cfg_scale is not None and bool(np.any(c_idx < n_classes))
    for i in range(len(taus) - 1, -1, -1):
        t = int(taus[i])
        abar_t = sched.alpha_bars[t]
        abar_prev = sched.alpha_bars[int(taus[i - 1])] if i > 0 else 1.0
        t_norm = np.full(n_samples, t / sched.timesteps)
        eps_hat = denoiser.forward_batch(theta, x, t_norm, c_idx)
        if guided:
            eps_u = denoiser.forward_batch(theta, x, t_norm, null_idx)
            eps_hat = eps_u + cfg_scale * (eps_hat - eps_u)
        x0_pred = (x - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
        sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) \
            * np.sqrt(max(1.0 - abar_t / abar_prev, 0.0))
        dir_coef = np.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0))
        x = np.sqrt(abar_prev) * x0_pred + dir_coef * eps_hat
        if sigma > 0.0:
            x = x + sigma * rng.standard_normal((n_samples, d))
    return x
