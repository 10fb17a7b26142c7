"""
Tests for site updates, schedules and the EP loop.
"""

import numpy as np
import pytest

from src.models.ep_state import EPState, Schedule, UpdatePolicy
from src.models.estimates import EstimatorError, HybridMomentEstimate, MomentEstimator
from src.models.gaussian import NaturalParams, NotPositiveDefinite, to_moments
from src.services.abc_estimator import AbcConfig, AbcEstimator
from src.services.builtin_models import ExactGaussianEstimator, GaussMeanModel, exact_posterior
from src.services.ep_engine import (
    AllSitesSkipped,
    DegenerateEstimate,
    EPEngine,
    MaxPassesExceeded,
    converged,
    run,
    site_update,
)


def _estimate(mu, Sigma, n_accepted=100, n_simulated=1000):
    return HybridMomentEstimate(
        Z_hat=n_accepted / n_simulated,
        mu_h=np.atleast_1d(mu),
        Sigma_h=np.atleast_2d(Sigma),
        n_accepted=n_accepted,
        n_simulated=n_simulated,
    )


class FailingEstimator(MomentEstimator):
    """Delegates to another estimator except for the listed sites."""

    def __init__(self, inner, failing):
        self.inner = inner
        self.failing = set(failing)

    def estimate(self, i, cavity, state, pass_index):
        if i in self.failing:
            raise EstimatorError(f"site {i} refused")
        return self.inner.estimate(i, cavity, state, pass_index)


@pytest.fixture
def one_site_state(std_prior):
    return EPState.initial(std_prior, 1)


class TestSiteUpdate:
    def test_hybrid_equal_to_cavity_gives_flat_site(self, one_site_state):
        new_site, new_global = site_update(1, _estimate(0.0, 1.0), one_site_state, UpdatePolicy())
        np.testing.assert_allclose(new_site.r, 0.0, atol=1e-15)
        np.testing.assert_allclose(new_site.Q, 0.0, atol=1e-15)
        assert new_global.max_abs_diff(one_site_state.global_) < 1e-15

    def test_conjugate_factor(self, one_site_state):
        new_site, new_global = site_update(1, _estimate(0.5, 0.5), one_site_state, UpdatePolicy())
        assert new_global.r == pytest.approx([1.0])
        assert new_global.Q[0, 0] == pytest.approx(2.0)
        assert new_site.r == pytest.approx([1.0])
        assert new_site.Q[0, 0] == pytest.approx(1.0)

    def test_fractional_update_is_natural_midpoint(self, one_site_state):
        _, new_global = site_update(1, _estimate(0.5, 0.5), one_site_state, UpdatePolicy(alpha=0.5))
        assert new_global.r[0] == pytest.approx(0.5, abs=1e-12)
        assert new_global.Q[0, 0] == pytest.approx(1.5, abs=1e-12)

    def test_sum_invariant_for_any_alpha(self, std_prior):
        state = EPState.initial(std_prior, 3)
        for alpha in (0.1, 0.5, 1.0):
            new_site, new_global = site_update(2, _estimate(0.3, 0.6), state, UpdatePolicy(alpha=alpha))
            sites = list(state.sites)
            sites[2] = new_site
            total = NaturalParams(sum(s.r for s in sites), sum(s.Q for s in sites))
            assert total.max_abs_diff(new_global) < 1e-12

    def test_too_few_acceptances(self, one_site_state):
        with pytest.raises(DegenerateEstimate):
            site_update(1, _estimate(0.0, 1.0, n_accepted=3), one_site_state, UpdatePolicy(min_accept=10))

    def test_weighted_estimate_uses_effective_acceptances(self, one_site_state):
        est = HybridMomentEstimate(
            Z_hat=0.1, mu_h=[0.0], Sigma_h=[[1.0]], n_accepted=500, n_simulated=5000, effective_accepted=4.2
        )
        assert est.accepted_support == pytest.approx(4.2)
        with pytest.raises(DegenerateEstimate):
            site_update(1, est, one_site_state, UpdatePolicy(min_accept=10))

    def test_analytic_estimates_bypass_acceptance_floor(self, one_site_state):
        est = HybridMomentEstimate(
            Z_hat=0.3, mu_h=[0.5], Sigma_h=[[0.5]], n_accepted=0, n_simulated=0, monte_carlo=False
        )
        site_update(1, est, one_site_state, UpdatePolicy(min_accept=10))

    def test_prior_site_rejected(self, one_site_state):
        with pytest.raises(ValueError):
            site_update(0, _estimate(0.0, 1.0), one_site_state, UpdatePolicy())


class TestConverged:
    def test_identical(self):
        p = NaturalParams([0.3], [[2.0]])
        assert converged(p, p, 1e-12)

    def test_large_change(self):
        assert not converged(NaturalParams([0.0], [[1.0]]), NaturalParams([1.0], [[1.0]]), 1e-6)

    def test_tiny_relative_change(self):
        assert converged(NaturalParams([1.0], [[2.0]]), NaturalParams([1.0 + 1e-9], [[2.0]]), 1e-6)

    def test_small_precision_change(self):
        prev = NaturalParams([0.0], [[1.0]])
        curr = NaturalParams([0.0], [[1.001]])
        assert not converged(prev, curr, 1e-4)
        assert converged(prev, curr, 1e-2)


class TestSchedule:
    def test_blocks_cover_sites_in_order(self):
        assert Schedule.sequential().blocks(3) == [[0], [1], [2], [3]]
        assert Schedule.parallel().blocks(3) == [[0, 1, 2, 3]]
        assert Schedule.block_parallel(3).blocks(4) == [[0, 1, 2], [3, 4]]

    def test_block_parallel_requires_n_core(self):
        with pytest.raises(ValueError):
            Schedule(kind="block_parallel")

    def test_policy_alpha_range(self):
        with pytest.raises(ValueError):
            UpdatePolicy(alpha=0.0)
        with pytest.raises(ValueError):
            UpdatePolicy(alpha=1.5)


class TestRunExact:
    def test_one_sequential_pass_is_exact(self, gauss_model):
        trace = run(gauss_model, ExactGaussianEstimator(gauss_model), Schedule.sequential(), UpdatePolicy(), seed=0)
        oracle = exact_posterior(gauss_model)
        first_pass = trace.pass_means()[0]
        np.testing.assert_allclose(first_pass, oracle.mu, atol=1e-8)
        assert trace.converged
        assert trace.passes_run == 2
        final = to_moments(trace.state.global_)
        np.testing.assert_allclose(final.mu, oracle.mu, atol=1e-8)
        np.testing.assert_allclose(final.Sigma, oracle.Sigma, atol=1e-8)
        np.testing.assert_allclose(trace.pass_means()[1], first_pass, atol=1e-10)

    def test_parallel_exact_factors(self, gauss_model):
        trace = run(gauss_model, ExactGaussianEstimator(gauss_model), Schedule.parallel(), UpdatePolicy(), seed=0)
        np.testing.assert_allclose(to_moments(trace.state.global_).mu, exact_posterior(gauss_model).mu, atol=1e-8)

    def test_prior_site_untouched_and_sum_invariant(self, gauss_model):
        trace = run(
            gauss_model, ExactGaussianEstimator(gauss_model), Schedule.block_parallel(2), UpdatePolicy(), seed=0
        )
        assert trace.state.sites[0].equals(gauss_model.prior)
        assert trace.state.sum_residual() < 1e-9

    def test_trace_row_count(self, gauss_model):
        trace = run(gauss_model, ExactGaussianEstimator(gauss_model), Schedule.sequential(), UpdatePolicy(), seed=0)
        assert len(trace.records) == trace.passes_run * gauss_model.n_chunks
        assert [r.site for r in trace.records[:5]] == [1, 2, 3, 4, 5]

    def test_max_passes_flagged(self, gauss_model):
        policy = UpdatePolicy(max_passes=1)
        trace = run(gauss_model, ExactGaussianEstimator(gauss_model), Schedule.sequential(), policy, seed=0)
        assert not trace.converged
        assert trace.passes_run == 1

    def test_max_passes_raised_on_request(self, gauss_model):
        engine = EPEngine(
            gauss_model, ExactGaussianEstimator(gauss_model), Schedule.sequential(), UpdatePolicy(max_passes=1)
        )
        with pytest.raises(MaxPassesExceeded) as info:
            engine.run(raise_on_max_passes=True)
        assert info.value.trace.passes_run == 1


class TestSkips:
    def test_skipped_site_leaves_state_unchanged(self, gauss_model):
        estimator = FailingEstimator(ExactGaussianEstimator(gauss_model), failing={3})
        trace = run(gauss_model, estimator, Schedule.sequential(), UpdatePolicy(max_passes=2), seed=0)
        skipped = [r for r in trace.records if r.skipped]
        assert [r.site for r in skipped] == [3, 3]
        assert "ESTIMATOR_ERROR" in skipped[0].reason
        assert trace.state.sites[3].equals(NaturalParams.zeros(1))

    def test_all_sites_skipped(self, gauss_model):
        estimator = FailingEstimator(ExactGaussianEstimator(gauss_model), failing=range(1, 6))
        with pytest.raises(AllSitesSkipped) as info:
            run(gauss_model, estimator, Schedule.parallel(), UpdatePolicy(), seed=0)
        trace = info.value.trace
        assert len(trace.records) == 5
        assert all(r.skipped for r in trace.records)
        assert trace.state.equals(EPState.initial(gauss_model.prior, 5))

    def test_invalid_prior(self):
        bad_prior = NaturalParams([0.0], [[-1.0]])
        model = GaussMeanModel(np.array([0.0]), bad_prior)
        with pytest.raises(NotPositiveDefinite):
            EPEngine(model, ExactGaussianEstimator(model), Schedule.sequential(), UpdatePolicy())


class TestScheduleDegeneracy:
    @pytest.fixture
    def abc_setup(self, std_prior):
        model = GaussMeanModel.synthetic(np.array([1.0]), 6, std_prior, data_seed=5, seed=2)
        cfg = AbcConfig(epsilon=0.5, m_target=200, m_max=20_000)
        return model, cfg, UpdatePolicy(max_passes=2, convergence_tol=1e-12)

    @staticmethod
    def _trace_values(trace):
        return [(r.pass_index, r.site, r.mean.tolist(), r.cov.tolist(), r.n_accepted, r.skipped) for r in trace.records]

    def test_block_of_one_is_sequential(self, abc_setup):
        model, cfg, policy = abc_setup
        seq = run(model, AbcEstimator(model, cfg, 9), Schedule.sequential(), policy, seed=9)
        blk = run(model, AbcEstimator(model, cfg, 9), Schedule.block_parallel(1), policy, seed=9)
        assert self._trace_values(seq) == self._trace_values(blk)
        assert seq.state.equals(blk.state)

    def test_single_block_is_parallel(self, abc_setup):
        model, cfg, policy = abc_setup
        par = run(model, AbcEstimator(model, cfg, 9), Schedule.parallel(), policy, seed=9)
        blk = run(model, AbcEstimator(model, cfg, 9), Schedule.block_parallel(model.n_chunks + 1), policy, seed=9)
        assert self._trace_values(par) == self._trace_values(blk)
        assert par.state.equals(blk.state)

    def test_worker_count_does_not_change_results(self, abc_setup):
        model, cfg, policy = abc_setup
        schedule = Schedule.block_parallel(3)
        one = EPEngine(model, AbcEstimator(model, cfg, 4), schedule, policy, seed=4, max_workers=1).run()
        many = EPEngine(model, AbcEstimator(model, cfg, 4), schedule, policy, seed=4, max_workers=4).run()
        assert one.state.equals(many.state)
