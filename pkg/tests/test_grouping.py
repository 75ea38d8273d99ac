import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisegauge.grouping import (GroupedBatch, group_weights, mean_diffusion_loss,
                                 sample_grouped_batch, weighted_inner_loss)
from noisegauge.grouping import PlainBatch
from noisegauge.models import ParamVector, time_embedding_batch

from conftest import max_rel_error

finite_scores = st.lists(
    st.floats(min_value=-50, max_value=50, allow_nan=False, allow_infinity=False),
    min_size=1, max_size=12)


class TestGroupWeights:
    def test_equal_scores_uniform(self):
        for k in (1, 2, 5):
            w = group_weights(np.full(k, 3.7)).w
            assert np.allclose(w, np.full(k, 1.0 / k), rtol=0, atol=1e-15)

    def test_hand_computed_softmax(self):
        w = group_weights(np.array([0.0, np.log(3.0)])).w
        assert max_rel_error(w, [0.25, 0.75]) < 1e-12

    def test_large_shift_is_stable(self):
        w = group_weights(np.array([1.0, 1001.0])).w
        assert np.all(np.isfinite(w))
        assert np.allclose(w, [0.0, 1.0], atol=1e-300)

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            group_weights(np.array([0.0, np.nan]))
        with pytest.raises(ValueError):
            group_weights(np.array([np.inf, 0.0]))

    @given(finite_scores)
    @settings(max_examples=200, deadline=None)
    def test_normalization_and_monotonicity(self, scores):
        s = np.asarray(scores)
        w = group_weights(s).w
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.all(w >= 0)
        scale = max(1.0, np.abs(s).max())
        for i in range(len(s)):
            for j in range(len(s)):
                if s[i] > s[j]:
                    # monotone always; strict once the gap is float-representable
                    assert w[i] >= w[j]
                    if s[i] - s[j] > 1e-9 * scale:
                        assert w[i] > w[j]

    @given(finite_scores, st.floats(min_value=-100, max_value=100,
                                    allow_nan=False, allow_infinity=False))
    @settings(max_examples=200, deadline=None)
    def test_shift_invariance(self, scores, shift):
        s = np.asarray(scores)
        w0 = group_weights(s).w
        w1 = group_weights(s + shift).w
        assert np.max(np.abs(w0 - w1)) <= 1e-12


class TestSampleGroupedBatch:
    def test_singleton_group(self, short_schedule):
        rng = np.random.default_rng(0)
        pool = rng.standard_normal((16, 2))
        batch = sample_grouped_batch(pool, None, 4, 1, 0.0, short_schedule, rng)
        assert batch.group_size == 1 and batch.n_groups == 4

    def test_full_dropout(self, short_schedule):
        rng = np.random.default_rng(0)
        pool = rng.standard_normal((16, 2))
        labels = rng.integers(0, 3, 16)
        batch = sample_grouped_batch(pool, labels, 32, 2, 1.0, short_schedule, rng,
                                     n_classes=3)
        assert np.all(batch.cond_idx == 3)

    def test_empirical_drop_rate(self, short_schedule):
        rng = np.random.default_rng(1)
        pool = rng.standard_normal((8, 2))
        labels = rng.integers(0, 3, 8)
        n = 100_000
        batch = sample_grouped_batch(pool, labels, n, 1, 0.1, short_schedule, rng,
                                     n_classes=3)
        rate = np.mean(batch.cond_idx == 3)
        se = np.sqrt(0.1 * 0.9 / n)
        assert abs(rate - 0.1) < 3 * se

    def test_empty_pool_rejected(self, short_schedule):
        with pytest.raises(ValueError):
            sample_grouped_batch(np.zeros((0, 2)), None, 2, 2, 0.1, short_schedule,
                                 np.random.default_rng(0))

    def test_noises_fresh_across_groups(self, short_schedule):
        rng = np.random.default_rng(2)
        pool = rng.standard_normal((4, 2))
        batch = sample_grouped_batch(pool, None, 64, 4, 0.0, short_schedule, rng)
        flat = batch.noises.reshape(-1, 2)
        assert len(np.unique(flat, axis=0)) == len(flat)


def _bias_only_rater(rater, bias: float) -> ParamVector:
    eta = ParamVector(np.zeros(rater.init_params(0).size), rater.init_params(0).layout)
    parts = eta.as_dict()
    parts["b2"][:] = bias
    return ParamVector.from_dict(parts, eta.layout)


class TestWeightedInnerLoss:
    def test_singleton_groups_reduce_to_plain_loss(self, tiny_denoiser, tiny_rater,
                                                   short_schedule):
        rng = np.random.default_rng(3)
        theta = ParamVector(rng.standard_normal(tiny_denoiser.init_params(0).size) * 0.4,
                            tiny_denoiser.init_params(0).layout)
        eta = tiny_rater.init_params(0)
        batch = sample_grouped_batch(rng.standard_normal((16, 2)), None, 8, 1, 0.0,
                                     short_schedule, rng)
        loss = weighted_inner_loss(tiny_denoiser, tiny_rater, theta, eta, batch,
                                   short_schedule)
        plain = PlainBatch(x0=batch.x0, cond_idx=batch.cond_idx, t=batch.t,
                           eps=batch.noises[:, 0, :])
        assert loss == mean_diffusion_loss(tiny_denoiser, theta, plain, short_schedule)

    def test_constant_rater_gives_uniform_weights(self, tiny_denoiser, tiny_rater,
                                                  short_schedule):
        rng = np.random.default_rng(4)
        theta = ParamVector(rng.standard_normal(tiny_denoiser.init_params(0).size) * 0.4,
                            tiny_denoiser.init_params(0).layout)
        eta = _bias_only_rater(tiny_rater, 2.5)
        batch = sample_grouped_batch(rng.standard_normal((16, 2)), None, 4, 3, 0.0,
                                     short_schedule, rng)
        loss = weighted_inner_loss(tiny_denoiser, tiny_rater, theta, eta, batch,
                                   short_schedule)
        # uniform weights: mean over groups of mean-over-candidates instance loss
        per = []
        for j in range(batch.n_groups):
            x0, cond, t, noises = batch.group(j)
            for k in range(batch.group_size):
                pb = PlainBatch(x0=x0[None], cond_idx=np.array([cond]),
                                t=np.array([t]), eps=noises[k][None])
                per.append(mean_diffusion_loss(tiny_denoiser, theta, pb, short_schedule))
        expected = np.mean(np.asarray(per).reshape(batch.n_groups, batch.group_size)
                           .mean(axis=1))
        assert abs(loss - expected) / expected < 1e-12

    def test_matches_three_line_oracle(self, small_denoiser, small_rater, short_schedule):
        rng = np.random.default_rng(5)
        theta = ParamVector(rng.standard_normal(small_denoiser.init_params(0).size) * 0.3,
                            small_denoiser.init_params(0).layout)
        eta = ParamVector(rng.standard_normal(small_rater.init_params(0).size) * 0.3,
                          small_rater.init_params(0).layout)
        pool = rng.standard_normal((8, 2))
        labels = rng.integers(0, 3, 8)
        batch = sample_grouped_batch(pool, labels, 2, 4, 0.2, short_schedule, rng,
                                     n_classes=3)
        loss = weighted_inner_loss(small_denoiser, small_rater, theta, eta, batch,
                                   short_schedule)

        # independent recomputation: scores -> softmax -> weighted sum
        total = 0.0
        for j in range(batch.n_groups):
            x0, cond, t, noises = batch.group(j)
            t_norm = np.full(batch.group_size, t / short_schedule.timesteps)
            scores = small_rater.score_batch(eta, noises, t_norm,
                                             np.tile(x0, (batch.group_size, 1)),
                                             np.full(batch.group_size, cond))
            e = np.exp(scores - scores.max())
            w = e / e.sum()
            abar = short_schedule.alpha_bars[t]
            x_t = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * noises
            eps_hat = small_denoiser.forward_batch(theta, x_t, t_norm,
                                                   np.full(batch.group_size, cond))
            total += float(np.sum(w * np.sum((noises - eps_hat) ** 2, axis=1)))
        expected = total / batch.n_groups
        assert abs(loss - expected) / expected < 1e-12

    def test_scope_invariance_across_groups(self, small_denoiser, small_rater,
                                            short_schedule):
        from noisegauge.grouping import weighted_inner_loss_graph
        from noisegauge.models import param_consts
        rng = np.random.default_rng(6)
        theta = small_denoiser.init_params(1)
        eta = ParamVector(rng.standard_normal(small_rater.init_params(0).size) * 0.3,
                          small_rater.init_params(0).layout)
        pool = rng.standard_normal((8, 2))
        batch = sample_grouped_batch(pool, None, 3, 4, 0.0, short_schedule, rng,
                                     n_classes=3)
        _, w0 = weighted_inner_loss_graph(small_denoiser, small_rater,
                                          param_consts(theta), param_consts(eta),
                                          batch, short_schedule)
        mutated = GroupedBatch(x0=batch.x0.copy(), cond_idx=batch.cond_idx.copy(),
                               t=batch.t.copy(), noises=batch.noises.copy())
        mutated.noises[2] += 10.0
        mutated.x0[2] -= 5.0
        _, w1 = weighted_inner_loss_graph(small_denoiser, small_rater,
                                          param_consts(theta), param_consts(eta),
                                          mutated, short_schedule)
        assert np.array_equal(w0[:2], w1[:2])
