"""
Tests for the shared simulation pool, its weights and ESS-triggered refresh.
"""

import numpy as np
import pytest

from src.models.ep_state import EPState, Schedule, UpdatePolicy
from src.models.gaussian import MomentParams, NaturalParams, to_moments
from src.services.abc_estimator import AbcConfig, AbcEstimator, estimate_site_moments
from src.services.builtin_models import AR1Model, GaussMeanModel
from src.services.ep_engine import run
from src.services.recycling import (
    DegenerateWeights,
    NonIIDModel,
    RecyclePool,
    RecyclingEstimator,
    effective_sample_size,
    recycled_pass,
    recycling_weights,
)


def _pool(thetas, proposal):
    thetas = np.asarray(thetas, dtype=float).reshape(-1, proposal.dim)
    return RecyclePool(thetas=thetas, summaries=np.zeros_like(thetas), proposal=proposal)


class TestWeights:
    def test_flat_site_weight_is_one(self):
        g = NaturalParams([0.4], [[2.0]])
        w = recycling_weights(g, NaturalParams.zeros(1), np.array([[0.3], [-1.2]]))
        np.testing.assert_allclose(w, 1.0)

    def test_hand_computed_prefactor(self):
        w = recycling_weights(NaturalParams([0.0], [[2.0]]), NaturalParams([0.0], [[1.0]]), np.array([[1.0]]))
        assert w[0] == pytest.approx(0.5 * np.exp(0.5))
        assert w[0] == pytest.approx(0.8244, abs=1e-4)


class TestEffectiveSampleSize:
    def test_same_target(self):
        proposal = MomentParams([0.0], [[1.0]])
        pool = _pool(np.random.default_rng(0).standard_normal(500), proposal)
        assert effective_sample_size(pool, proposal) == pytest.approx(500.0)

    def test_single_point(self):
        pool = _pool([0.3], MomentParams([0.0], [[1.0]]))
        assert effective_sample_size(pool, MomentParams([4.0], [[0.1]])) == pytest.approx(1.0)

    def test_mean_shift_limit(self):
        proposal = MomentParams([0.0], [[1.0]])
        pool = _pool(np.random.default_rng(1).standard_normal(100_000), proposal)
        ratio = effective_sample_size(pool, MomentParams([0.5], [[1.0]])) / pool.size
        assert ratio == pytest.approx(np.exp(-0.25), rel=0.02)

    def test_bounds(self):
        proposal = MomentParams([0.0, 0.0], np.eye(2))
        pool = _pool(np.random.default_rng(2).standard_normal((300, 2)), proposal)
        ess = effective_sample_size(pool, MomentParams([3.0, -2.0], 0.2 * np.eye(2)))
        assert 1.0 <= ess <= 300.0


class TestRecycledPass:
    def test_requires_iid_model(self, std_prior):
        model = AR1Model(np.array([0.0, 0.5, 0.2, -0.1]), NaturalParams([0.0, 0.0], np.eye(2)))
        state = EPState.initial(model.prior, model.n_chunks)
        cfg = AbcConfig(epsilon=1.0, m_target=10, m_max=100)
        with pytest.raises(NonIIDModel):
            recycled_pass(state, None, model, cfg, np.random.default_rng(0))
        with pytest.raises(NonIIDModel):
            RecyclingEstimator(model, cfg, seed=0)

    def test_initial_pool_and_results(self, gauss_model):
        state = EPState.initial(gauss_model.prior, gauss_model.n_chunks)
        cfg = AbcConfig(epsilon=0.5, m_target=10, m_max=5000)
        results, pool, refreshed = recycled_pass(state, None, gauss_model, cfg, np.random.default_rng(0))
        assert refreshed
        assert pool.size == 5000
        assert sorted(results) == [1, 2, 3, 4, 5]
        for est in results.values():
            assert est.n_simulated == 5000
            assert 0 < est.n_accepted <= 5000

    def test_effective_acceptances_follow_weights(self, gauss_model):
        flat = EPState.initial(gauss_model.prior, gauss_model.n_chunks)
        cfg = AbcConfig(epsilon=0.5, m_target=10, m_max=5000)
        results, _, _ = recycled_pass(flat, None, gauss_model, cfg, np.random.default_rng(0))
        for est in results.values():
            assert est.effective_accepted == pytest.approx(est.n_accepted)

        site = NaturalParams([0.5], [[0.5]])
        skewed = EPState(
            sites=flat.sites[:1] + (site,) + flat.sites[2:],
            global_=NaturalParams([0.5], [[1.5]]),
        )
        results, _, _ = recycled_pass(skewed, None, gauss_model, cfg, np.random.default_rng(0), sites=[1])
        est = results[1]
        assert 1.0 <= est.effective_accepted < est.n_accepted

    def test_pool_kept_while_ess_high(self, gauss_model):
        state = EPState.initial(gauss_model.prior, gauss_model.n_chunks)
        cfg = AbcConfig(epsilon=0.5, m_target=10, m_max=2000)
        _, pool, _ = recycled_pass(state, None, gauss_model, cfg, np.random.default_rng(0))
        _, same_pool, refreshed = recycled_pass(state, pool, gauss_model, cfg, np.random.default_rng(1))
        assert not refreshed
        assert same_pool is pool

    def test_refresh_when_target_moves(self, gauss_model):
        state = EPState.initial(gauss_model.prior, gauss_model.n_chunks)
        cfg = AbcConfig(epsilon=0.5, m_target=10, m_max=2000)
        _, pool, _ = recycled_pass(state, None, gauss_model, cfg, np.random.default_rng(0))
        moved = EPState(
            sites=state.sites[:1] + (NaturalParams([40.0], [[20.0]]),) + state.sites[2:],
            global_=NaturalParams([40.0], [[21.0]]),
        )
        _, new_pool, refreshed = recycled_pass(moved, pool, gauss_model, cfg, np.random.default_rng(1))
        assert refreshed
        assert new_pool is not pool

    def test_no_acceptance_is_degenerate(self, std_prior):
        model = GaussMeanModel(np.array([50.0]), std_prior)
        state = EPState.initial(std_prior, 1)
        cfg = AbcConfig(epsilon=0.01, m_target=1, m_max=200)
        results, _, _ = recycled_pass(state, None, model, cfg, np.random.default_rng(0))
        assert isinstance(results[1], DegenerateWeights)

    def test_matches_direct_estimate_when_pool_is_cavity(self, std_prior):
        # With one site the global equals the cavity, so pool and direct draws share a law
        model = GaussMeanModel(np.array([0.4]), std_prior, seed=3)
        state = EPState.initial(std_prior, 1)
        cfg = AbcConfig(epsilon=0.3, m_target=1, m_max=200_000)
        results, _, _ = recycled_pass(state, None, model, cfg, np.random.default_rng(5))
        recycled = results[1]
        direct = estimate_site_moments(
            1, to_moments(state.global_), model, AbcConfig(epsilon=0.3, m_target=20_000, m_max=200_000), (5, 1, 1)
        )
        se = np.sqrt(recycled.Sigma_h[0, 0] / recycled.n_accepted + direct.Sigma_h[0, 0] / direct.n_accepted)
        assert abs(recycled.mu_h[0] - direct.mu_h[0]) < 3 * se
        assert recycled.Sigma_h[0, 0] == pytest.approx(direct.Sigma_h[0, 0], rel=0.05)


class TestRecyclingEstimator:
    def test_runs_under_every_schedule(self, std_prior):
        model = GaussMeanModel.synthetic(np.array([1.0]), 8, std_prior, data_seed=1, seed=1)
        cfg = AbcConfig(epsilon=0.3, m_target=10, m_max=20_000)
        policy = UpdatePolicy(max_passes=3)
        for schedule in (Schedule.sequential(), Schedule.parallel(), Schedule.block_parallel(3)):
            estimator = RecyclingEstimator(model, cfg, seed=2, ess_threshold=0.9)
            trace = run(model, estimator, schedule, policy, seed=2)
            assert estimator.refresh_count >= 1
            assert trace.pool_refreshes == estimator.refresh_count
            assert all(1.0 <= ess <= 20_000 for ess in estimator.ess_history)
            assert not all(r.skipped for r in trace.records)

    @pytest.mark.slow
    def test_recycled_and_direct_runs_agree(self, std_prior):
        model = GaussMeanModel.synthetic(np.array([1.0]), 20, std_prior, data_seed=4, seed=4)
        policy = UpdatePolicy(max_passes=4)
        direct_cfg = AbcConfig(epsilon=0.2, m_target=5000, m_max=100_000)
        recycle_cfg = AbcConfig(epsilon=0.2, m_target=10, m_max=100_000)
        seeds = range(1, 9)

        direct_means, recycled_means = [], []
        for seed in seeds:
            direct = run(model, AbcEstimator(model, direct_cfg, seed), Schedule.parallel(), policy, seed=seed)
            direct_means.append(to_moments(direct.state.global_).mu[0])

            estimator = RecyclingEstimator(model, recycle_cfg, seed=seed, ess_threshold=0.9)
            recycled = run(model, estimator, Schedule.parallel(), policy, seed=seed)
            recycled_means.append(to_moments(recycled.state.global_).mu[0])
            # The prior-drawn pool cannot cover the posterior, so a later pass must redraw it
            assert estimator.ess_refresh_count >= 1
            assert estimator.refresh_count == estimator.ess_refresh_count + 1
            assert all(1.0 <= ess <= 100_000 for ess in estimator.ess_history)

        k = len(seeds)
        d, r = np.array(direct_means), np.array(recycled_means)
        combined_se = np.sqrt(d.var(ddof=1) / k + r.var(ddof=1) / k)
        assert abs(d.mean() - r.mean()) < 3 * combined_se
