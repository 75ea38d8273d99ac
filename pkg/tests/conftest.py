import numpy as np
import pytest

from noisegauge.diffusion import build_schedule
from noisegauge.models import Denoiser, DenoiserArch, Rater, RaterArch


def max_rel_error(a, b):
    """L-inf error of a against oracle b, relative to the oracle's scale."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.max(np.abs(b))
    if scale == 0.0:
        return float(np.max(np.abs(a)))
    return float(np.max(np.abs(a - b)) / scale)


@pytest.fixture
def tiny_denoiser():
    return Denoiser(DenoiserArch(d=2, n_classes=0, t_emb_dim=2, c_emb_dim=2, hidden=(4,)))


@pytest.fixture
def tiny_rater():
    return Rater(RaterArch(d=2, n_classes=0, t_emb_dim=2, c_emb_dim=2, hidden=(4,)))


@pytest.fixture
def small_denoiser():
    return Denoiser(DenoiserArch(d=2, n_classes=3, t_emb_dim=8, c_emb_dim=8, hidden=(16, 16)))


@pytest.fixture
def small_rater():
    return Rater(RaterArch(d=2, n_classes=3, t_emb_dim=8, c_emb_dim=8, hidden=(12, 12)))


@pytest.fixture
def short_schedule():
    return build_schedule(100, 1e-4, 0.02)
