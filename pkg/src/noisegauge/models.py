"""Denoiser and noise-rater networks with exact tape-based gradients.

Both are small concatenation-input MLPs in float64: the denoiser maps
[x_t, t_emb, c_emb] to a predicted noise vector, the rater maps
[eps, x0, t_emb, c_emb] to a scalar score.  SiLU keeps second derivatives
defined everywhere, which the bilevel machinery relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .tape import Var

Array = np.ndarray

TIME_EMB_BASE = 1.0e4


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter store plus the (name, shape) layout mapping slices to layers."""

    values: Array
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if self.values.size != expected:
            raise ValueError(f"layout expects {expected} values, got {self.values.size}")

    @property
    def size(self) -> int:
        return self.values.size

    def as_dict(self) -> dict[str, Array]:
        out, off = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[off:off + n].reshape(shape)
            off += n
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    @classmethod
    def from_dict(cls, parts: dict[str, Array],
                  layout: tuple[tuple[str, tuple[int, ...]], ...]) -> "ParamVector":
        flat = np.concatenate([np.asarray(parts[name], dtype=np.float64).reshape(-1)
                               for name, _ in layout])
        return cls(flat, layout)

    @classmethod
    def zeros(cls, layout) -> "ParamVector":
        return cls(np.zeros(sum(int(np.prod(s)) for _, s in layout)), layout)


def param_leaves(pv: ParamVector) -> dict[str, Var]:
    """Differentiable leaf Vars, one per layout entry."""
    return {name: tape.leaf(arr) for name, arr in pv.as_dict().items()}


def param_consts(pv: ParamVector) -> dict[str, Var]:
    return {name: Var(arr) for name, arr in pv.as_dict().items()}


def grads_to_vector(grad_vars: dict[str, Var], layout) -> ParamVector:
    return ParamVector.from_dict({k: v.data for k, v in grad_vars.items()}, layout)


def time_embedding(t_norm: float, dim: int) -> Array:
    return time_embedding_batch(np.array([t_norm]), dim)[0]


def time_embedding_batch(t_norm: Array, dim: int) -> Array:
    """Interleaved (sin, cos) pairs at geometrically spaced frequencies."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t_norm, dtype=np.float64)
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = TIME_EMB_BASE ** (-np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    out = np.empty((len(t), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


@dataclass(frozen=True)
class DenoiserArch:
    d: int
    n_classes: int = 0
    t_emb_dim: int = 32
    c_emb_dim: int = 32
    hidden: tuple[int, ...] = (128, 128)

    @property
    def in_dim(self) -> int:
        return self.d + self.t_emb_dim + self.c_emb_dim

    @property
    def out_dim(self) -> int:
        return self.d


@dataclass(frozen=True)
class RaterArch:
    d: int
    n_classes: int = 0
    t_emb_dim: int = 32
    c_emb_dim: int = 32
    hidden: tuple[int, ...] = (64, 64)

    @property
    def in_dim(self) -> int:
        return 2 * self.d + self.t_emb_dim + self.c_emb_dim

    @property
    def out_dim(self) -> int:
        return 1


class _Mlp:
    """Shared layout/init/forward machinery for both networks."""

    zero_init_head = False

    def __init__(self, arch):
        self.arch = arch
        dims = [arch.in_dim, *arch.hidden, arch.out_dim]
        entries: list[tuple[str, tuple[int, ...]]] = [
            ("c_table", (arch.n_classes + 1, arch.c_emb_dim)),
        ]
        for i in range(len(dims) - 1):
            entries.append((f"w{i + 1}", (dims[i], dims[i + 1])))
            entries.append((f"b{i + 1}", (dims[i + 1],)))
        self._layout = tuple(entries)
        self._n_layers = len(dims) - 1

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return self._layout

    def init_params(self, seed: int) -> ParamVector:
        """Xavier-uniform weight matrices and zero biases.

        The denoiser zero-initializes its output projection (the backbone
        convention it stands in for), so an untrained model predicts zero.
        The rater must not: identical scores would collapse the group weights
        to a constant and starve meta-training of gradient, so its head is
        Xavier like every other layer.
        """
        rng = np.random.default_rng(seed)
        head = f"w{self._n_layers}"
        parts = {}
        for name, shape in self._layout:
            if len(shape) == 2:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                parts[name] = rng.uniform(-limit, limit, size=shape)
                if self.zero_init_head and name == head:
                    parts[name] = np.zeros(shape)
            else:
                parts[name] = np.zeros(shape)
        return ParamVector.from_dict(parts, self._layout)

    def _trunk(self, p: dict[str, Var], features: Var) -> Var:
        h = features
        for i in range(1, self._n_layers + 1):
            h = tape.matmul(h, p[f"w{i}"]) + p[f"b{i}"]
            if i < self._n_layers:
                h = tape.silu(h)
        return h

    def forward_batch(self, params: ParamVector, *args) -> Array:
        return self.forward_graph(param_consts(params), *args).data


class Denoiser(_Mlp):
    zero_init_head = True

    def __init__(self, arch: DenoiserArch):
        super().__init__(arch)

    def forward_graph(self, p: dict[str, Var], x_t: Array, t_norm: Array,
                      cond_idx: Array) -> Var:
        """Batched prediction; x_t is (n, d), t_norm and cond_idx are (n,)."""
        t_emb = Var(time_embedding_batch(t_norm, self.arch.t_emb_dim))
        c_emb = tape.gather_rows(p["c_table"], np.asarray(cond_idx, dtype=int))
        feats = tape.concat([Var(np.asarray(x_t, dtype=np.float64)), t_emb, c_emb], axis=1)
        return self._trunk(p, feats)


class Rater(_Mlp):
    def __init__(self, arch: RaterArch):
        super().__init__(arch)

    def forward_graph(self, p: dict[str, Var], eps: Array, t_norm: Array,
                      x0: Array, cond_idx: Array) -> Var:
        """Batched scores with shape (n, 1)."""
        t_emb = Var(time_embedding_batch(t_norm, self.arch.t_emb_dim))
        c_emb = tape.gather_rows(p["c_table"], np.asarray(cond_idx, dtype=int))
        feats = tape.concat([
            Var(np.asarray(eps, dtype=np.float64)),
            Var(np.asarray(x0, dtype=np.float64)),
            t_emb,
            c_emb,
        ], axis=1)
        return self._trunk(p, feats)

    def score_batch(self, eta: ParamVector, eps: Array, t_norm: Array,
                    x0: Array, cond_idx: Array) -> Array:
        return self.forward_batch(eta, eps, t_norm, x0, cond_idx)[:, 0]


def denoiser_forward(denoiser: Denoiser, theta: ParamVector, x_t: Array,
                     t_norm: float, cond) -> Array:
    """Single-instance prediction; cond is a CondToken."""
    return denoiser.forward_batch(
        theta, np.asarray(x_t)[None, :], np.array([t_norm]),
        np.array([cond.index(denoiser.arch.n_classes)]))[0]


def rater_forward(rater: Rater, eta: ParamVector, eps: Array, t_norm: float,
                  x0: Array, cond) -> float:
    return float(rater.forward_batch(
        eta, np.asarray(eps)[None, :], np.array([t_norm]),
        np.asarray(x0)[None, :], np.array([cond.index(rater.arch.n_classes)]))[0, 0])


def grad_wrt_params(model, params: ParamVector, inputs: tuple, upstream: Array) -> ParamVector:
    """Exact gradient of <upstream, forward(params, inputs)> with respect to params."""
    leaves = param_leaves(params)
    out = model.forward_graph(leaves, *inputs)
    loss = tape.dot(Var(np.asarray(upstream, dtype=np.float64)), out)
    gs = tape.grad(loss, list(leaves.values()), create_graph=False)
    return grads_to_vector(dict(zip(leaves, gs)), model.layout())
