"""
EP iteration: site updates, the three update schedules and convergence.

All schedules share one block loop. Sequential EP is blocks of one site,
parallel EP is a single block holding every site, and block-parallel EP uses
blocks of n_core consecutive indices (the prior, index 0, is part of the
first block but is never updated). Sites of a block read the same state
snapshot; the global approximation is rebuilt from the sites at every block
boundary.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from src.core.config import settings
from src.core.errors import EPABCError
from src.core.logging import (
    log_pass_summary,
    log_run_start,
    log_site_skipped,
    log_site_update,
    logger,
)
from src.models.ep_state import EPState, EPTrace, Schedule, UpdatePolicy, UpdateRecord
from src.models.estimates import EstimatorError, HybridMomentEstimate, MomentEstimator
from src.models.gaussian import (
    MomentParams,
    NaturalParams,
    NotPositiveDefinite,
    cavity,
    symmetric_kl,
    sum_sites,
    to_moments,
    to_natural,
)
from src.models.model_spec import ChunkModel, ModelError


class EPEngineError(EPABCError):
    """Base exception for EP iteration failures."""

    code = "EP_ENGINE_ERROR"


class DegenerateEstimate(EPEngineError):
    """Raised when a Monte Carlo estimate has too few acceptances to be used."""

    code = "DEGENERATE_ESTIMATE"


class MaxPassesExceeded(EPEngineError):
    """Raised (on request) when the pass budget runs out before convergence."""

    code = "MAX_PASSES_EXCEEDED"

    def __init__(self, message: str, trace: EPTrace):
        super().__init__(message)
        self.trace = trace


class AllSitesSkipped(EPEngineError):
    """Raised when a whole pass produced no successful site update."""

    code = "ALL_SITES_SKIPPED"

    def __init__(self, message: str, trace: EPTrace):
        super().__init__(message)
        self.trace = trace


def site_update(
    i: int,
    est: HybridMomentEstimate,
    state: EPState,
    policy: UpdatePolicy,
) -> Tuple[NaturalParams, NaturalParams]:
    """
    Moment-match site i to a hybrid-moment estimate.

    The new global parameter is alpha * lambda(mu_h, Sigma_h) + (1 - alpha) *
    lambda_old; the site moves by the same difference, so the sum of the
    sites keeps matching the global parameter.

    Args:
        i: Site index (>= 1)
        est: Hybrid moments of site i
        state: State the estimate was computed from
        policy: Fractional step and acceptance floor

    Returns:
        (new site parameters, new global parameters)

    Raises:
        DegenerateEstimate: If a Monte Carlo estimate has fewer than min_accept (effective) acceptances
        NotPositiveDefinite: If Sigma_h or the new global precision cannot be factorized
    """
    if i < 1 or i >= len(state.sites):
        raise ValueError(f"site index {i} outside 1..{len(state.sites) - 1}")
    if est.monte_carlo and est.accepted_support < policy.min_accept:
        raise DegenerateEstimate(
            f"site {i}: {est.accepted_support:.1f} effective acceptances, need at least {policy.min_accept}"
        )

    target = to_natural(MomentParams(est.mu_h, est.Sigma_h))
    old = state.global_
    if policy.alpha == 1.0:
        new_global = target
    else:
        a = policy.alpha
        new_global = NaturalParams(a * target.r + (1.0 - a) * old.r, a * target.Q + (1.0 - a) * old.Q)
    if not new_global.is_positive_definite():
        raise NotPositiveDefinite(f"site {i}: updated global precision is not positive definite")

    site = state.sites[i]
    new_site = NaturalParams(site.r + new_global.r - old.r, site.Q + new_global.Q - old.Q)
    return new_site, new_global


def _relative_change(prev: np.ndarray, curr: np.ndarray) -> float:
    diff = np.linalg.norm(curr - prev)
    if diff == 0.0:
        return 0.0
    scale = max(np.linalg.norm(prev), np.linalg.norm(curr))
    return float(diff / scale) if scale > 0 else float("inf")


def converged(prev: NaturalParams, curr: NaturalParams, tol: float) -> bool:
    """
    True when the relative change in r, the relative Frobenius change in Q
    and (if both are proper Gaussians) their symmetric KL are all below tol.
    """
    if prev.dim != curr.dim:
        raise ValueError(f"dimension mismatch: {prev.dim} vs {curr.dim}")
    change = max(_relative_change(prev.r, curr.r), _relative_change(prev.Q, curr.Q))
    if change >= tol:
        return False
    if prev.is_positive_definite() and curr.is_positive_definite():
        change = max(change, symmetric_kl(to_moments(prev), to_moments(curr)))
    return change < tol


SiteOutcome = Union[Tuple[NaturalParams, HybridMomentEstimate], Exception]


class EPEngine:
    """Runs EP passes over the sites of a chunk model."""

    def __init__(
        self,
        model: ChunkModel,
        estimator: MomentEstimator,
        schedule: Schedule,
        policy: UpdatePolicy,
        seed: int = 0,
        max_workers: Optional[int] = None,
    ):
        if model.n_chunks < 1:
            raise ModelError("a model needs at least one chunk")
        if not model.prior.is_positive_definite():
            raise NotPositiveDefinite("prior precision is not positive definite")
        self.model = model
        self.estimator = estimator
        self.schedule = schedule
        self.policy = policy
        self.seed = seed
        self.max_workers = max_workers or settings.worker_count

    def _attempt(self, i: int, state: EPState, pass_index: int) -> SiteOutcome:
        """Cavity, estimate and site update for one site; errors are returned, not raised."""
        try:
            cav = cavity(state.global_, state.sites[i])
            if not cav.is_positive_definite():
                raise NotPositiveDefinite(f"site {i}: cavity precision is not positive definite")
            est = self.estimator.estimate(i, to_moments(cav), state, pass_index)
            new_site, _ = site_update(i, est, state, self.policy)
            return new_site, est
        except Exception as e:  # noqa: BLE001 - any failure skips the site
            return e

    def _run_block(self, sites: List[int], state: EPState, pass_index: int) -> Dict[int, Tuple[SiteOutcome, float]]:
        def timed(i: int):
            start = time.perf_counter()
            outcome = self._attempt(i, state, pass_index)
            return outcome, time.perf_counter() - start

        workers = min(self.max_workers, len(sites))
        if workers <= 1:
            return {i: timed(i) for i in sites}
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return dict(zip(sites, pool.map(timed, sites)))

    def run(self, raise_on_max_passes: bool = False) -> EPTrace:
        """
        Iterate passes until convergence or max_passes.

        Returns:
            EPTrace with one record per attempted site update

        Raises:
            AllSitesSkipped: If a pass updates no site (trace attached)
            MaxPassesExceeded: If requested and the run did not converge (trace attached)
        """
        n = self.model.n_chunks
        state = EPState.initial(self.model.prior, n)
        trace = EPTrace(state=state)
        blocks = self.schedule.blocks(n)
        log_run_start(self.model.name, self.schedule.label, n, self.seed)

        for pass_index in range(1, self.policy.max_passes + 1):
            pass_start = time.perf_counter()
            pass_global = state.global_
            n_updated = n_skipped = 0

            for block_index, block in enumerate(blocks):
                sites = [i for i in block if i >= 1]
                if not sites:
                    continue
                try:
                    self.estimator.prepare_block(state, sites, pass_index, block_index)
                except EstimatorError as e:
                    logger.warning(f"BLOCK_PREPARE_FAILED | pass={pass_index} | block={block_index} | {e}")
                outcomes = self._run_block(sites, state, pass_index)

                new_sites = list(state.sites)
                skipped: Dict[int, str] = {}
                for i in sites:
                    outcome, _ = outcomes[i]
                    if isinstance(outcome, Exception):
                        code = getattr(outcome, "code", type(outcome).__name__)
                        skipped[i] = f"{code}: {outcome}"
                        record = getattr(outcome, "record", None)
                    else:
                        new_sites[i] = outcome[0]
                        record = outcome[1].record
                    if record is not None:
                        trace.acceptance[i] = record

                candidate = EPState(sites=tuple(new_sites), global_=sum_sites(new_sites))
                if candidate.global_.is_positive_definite():
                    state = candidate
                else:
                    # Individually valid updates can still sum to an improper global
                    for i in sites:
                        skipped.setdefault(i, f"{NotPositiveDefinite.code}: block aggregate is not positive definite")
                moments = self._global_moments(state)

                for i in sites:
                    outcome, elapsed = outcomes[i]
                    if i in skipped:
                        n_skipped += 1
                        log_site_skipped(pass_index, i, skipped[i])
                        n_acc = n_sim = 0
                        record = getattr(outcome, "record", None)
                        if not isinstance(outcome, Exception):
                            n_acc, n_sim = outcome[1].n_accepted, outcome[1].n_simulated
                        elif record is not None:
                            n_acc, n_sim = record.n_accepted, record.n_simulated
                    else:
                        n_updated += 1
                        n_acc, n_sim = outcome[1].n_accepted, outcome[1].n_simulated
                        log_site_update(pass_index, i, moments.mu, n_acc, n_sim)
                    trace.records.append(
                        UpdateRecord(
                            pass_index=pass_index,
                            site=i,
                            mean=moments.mu,
                            cov=moments.Sigma,
                            n_accepted=n_acc,
                            n_simulated=n_sim,
                            skipped=i in skipped,
                            reason=skipped.get(i, ""),
                            wall_clock_s=elapsed,
                        )
                    )

            trace.state = state
            trace.passes_run = pass_index
            trace.pool_refreshes = getattr(self.estimator, "refresh_count", 0)
            log_pass_summary(
                pass_index,
                self._global_moments(state).mu,
                n_updated,
                n_skipped,
                time.perf_counter() - pass_start,
            )

            if n_updated == 0:
                trace.error = AllSitesSkipped.code
                raise AllSitesSkipped(f"pass {pass_index}: every site update was skipped", trace)
            if converged(pass_global, state.global_, self.policy.convergence_tol):
                trace.converged = True
                logger.info(f"CONVERGED | passes={pass_index}")
                return trace

        message = f"no convergence after {self.policy.max_passes} passes"
        logger.warning(f"{MaxPassesExceeded.code} | {message}")
        if raise_on_max_passes:
            raise MaxPassesExceeded(message, trace)
        return trace

    @staticmethod
    def _global_moments(state: EPState) -> MomentParams:
        # The sum of the sites is a proper Gaussian whenever every accepted update was
        return to_moments(state.global_)


def run(
    model: ChunkModel,
    estimator: MomentEstimator,
    schedule: Schedule,
    policy: UpdatePolicy,
    seed: int = 0,
) -> EPTrace:
    """Run EP on `model` with hybrid moments from `estimator`."""
    return EPEngine(model, estimator, schedule, policy, seed).run()
