"""
Recycling of simulations across sites for IID models.

One pool of (theta, summary) pairs drawn from a Gaussian proposal serves
every site through importance weighting. The pool is kept across blocks and
passes and regenerated from the current global approximation when its
effective sample size against that approximation falls below a threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from src.core.logging import log_pool_refresh
from src.models.estimates import (
    AcceptanceRecord,
    EstimatorError,
    HybridMomentEstimate,
    MomentEstimator,
)
from src.models.ep_state import EPState
from src.models.gaussian import MomentParams, NaturalParams, cavity, to_moments
from src.models.model_spec import ChunkModel
from src.services.abc_estimator import AbcConfig, summary_distance
from src.services.qmc import qmc_gaussian_stream

POOL_STREAM = 2**31 - 1

SiteResult = Union[HybridMomentEstimate, EstimatorError]


class DegenerateWeights(EstimatorError):
    """Raised when every importance weight of a site is zero."""

    code = "DEGENERATE_WEIGHTS"

    def __init__(self, message: str, record: Optional[AcceptanceRecord] = None):
        super().__init__(message)
        self.record = record


class NonIIDModel(EstimatorError):
    """Raised when recycling is requested for a model with non-IID chunks."""

    code = "NON_IID_MODEL"


@dataclass(frozen=True)
class RecyclePool:
    """Simulated pairs drawn from N(mu, Sigma) and shared by all sites."""

    thetas: np.ndarray
    summaries: np.ndarray
    proposal: MomentParams
    ess_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.thetas.shape[0] < 1 or self.thetas.shape[0] != self.summaries.shape[0]:
            raise ValueError(
                f"pool needs M >= 1 matching rows, got {self.thetas.shape[0]} thetas "
                f"and {self.summaries.shape[0]} summaries"
            )
        if not 0.0 < self.ess_threshold <= 1.0:
            raise ValueError(f"ess_threshold must lie in (0, 1], got {self.ess_threshold}")

    @property
    def size(self) -> int:
        return self.thetas.shape[0]


def draw_pool(
    model: ChunkModel,
    cfg: AbcConfig,
    proposal: MomentParams,
    size: int,
    rng: np.random.Generator,
    ess_threshold: float = 0.5,
) -> RecyclePool:
    """
    Draw a fresh pool from `proposal`, simulating one chunk per draw.

    Raises:
        NonIIDModel: If the model's chunks are not IID
    """
    if not model.iid:
        raise NonIIDModel(f"model '{model.name}' is not IID; recycling does not apply")
    if cfg.use_qmc:
        thetas = qmc_gaussian_stream(size, proposal, stream_offset=cfg.qmc_burn_in)
    else:
        thetas = proposal.mu + rng.standard_normal((size, proposal.dim)) @ proposal.chol.T
    summaries = model.simulate_batch(1, thetas, rng)
    return RecyclePool(thetas=thetas, summaries=summaries, proposal=proposal, ess_threshold=ess_threshold)


def _log_density_ratio(thetas: np.ndarray, target: MomentParams, proposal: MomentParams) -> np.ndarray:
    if np.array_equal(target.mu, proposal.mu) and np.array_equal(target.Sigma, proposal.Sigma):
        return np.zeros(thetas.shape[0])
    return (
        multivariate_normal(mean=target.mu, cov=target.Sigma).logpdf(thetas)
        - multivariate_normal(mean=proposal.mu, cov=proposal.Sigma).logpdf(thetas)
    ).reshape(thetas.shape[0])


def effective_sample_size(pool: RecyclePool, new_target: MomentParams) -> float:
    """
    ESS (sum w)^2 / sum w^2 of the pool reweighted towards `new_target`.

    Returns:
        A value in [1, M]
    """
    log_w = _log_density_ratio(pool.thetas, new_target, pool.proposal)
    ess = float(np.exp(2.0 * logsumexp(log_w) - logsumexp(2.0 * log_w)))
    return float(np.clip(ess, 1.0, pool.size))


def log_recycling_weights(global_: NaturalParams, site: NaturalParams, thetas: np.ndarray) -> np.ndarray:
    """
    Log of the recycling weight prefactor for each theta:

        log(|Q - Q_i| / |Q|) + 1/2 theta' Q_i theta - r_i' theta

    Raises:
        EstimatorError: If Q or Q - Q_i has a non-positive determinant
    """
    sign_cav, logdet_cav = np.linalg.slogdet(global_.Q - site.Q)
    sign_glob, logdet_glob = np.linalg.slogdet(global_.Q)
    if sign_cav <= 0 or sign_glob <= 0:
        raise EstimatorError("recycling weights need positive-determinant global and cavity precisions")
    quad = 0.5 * np.einsum("mi,ij,mj->m", thetas, site.Q, thetas)
    return logdet_cav - logdet_glob + quad - thetas @ site.r


def recycling_weights(global_: NaturalParams, site: NaturalParams, thetas: np.ndarray) -> np.ndarray:
    """Recycling weight prefactor (without the acceptance indicator)."""
    return np.exp(log_recycling_weights(global_, site, np.atleast_2d(thetas)))


def _site_estimate(
    i: int,
    state: EPState,
    pool: RecyclePool,
    model: ChunkModel,
    cfg: AbcConfig,
    log_ratio: np.ndarray,
) -> HybridMomentEstimate:
    dist = summary_distance(pool.summaries, model.observed_summary(i), cfg.distance_weights)
    record = AcceptanceRecord(site=i, distances=dist, epsilon=cfg.epsilon)
    accepted = dist <= cfg.epsilon
    n_accepted = int(np.count_nonzero(accepted))
    if n_accepted == 0:
        raise DegenerateWeights(f"site {i}: no pooled draw within epsilon", record=record)

    log_w = log_recycling_weights(state.global_, state.sites[i], pool.thetas) + log_ratio
    log_w = np.where(accepted, log_w, -np.inf)
    shift = np.max(log_w)
    if not np.isfinite(shift):
        raise DegenerateWeights(f"site {i}: importance weights are not finite", record=record)
    w = np.exp(log_w - shift)

    w_sum = w.sum()
    effective = float(w_sum**2 / np.sum(w**2))
    mu = (w @ pool.thetas) / w_sum
    second = (pool.thetas * w[:, None]).T @ pool.thetas / w_sum
    Z_hat = float(np.exp(shift) * w_sum / pool.size)
    return HybridMomentEstimate(
        Z_hat=Z_hat if np.isfinite(Z_hat) else float(np.finfo(float).max),
        mu_h=mu,
        Sigma_h=second - np.outer(mu, mu),
        n_accepted=n_accepted,
        n_simulated=pool.size,
        record=record,
        effective_accepted=effective,
    )


def recycled_pass(
    state: EPState,
    pool: Optional[RecyclePool],
    model: ChunkModel,
    cfg: AbcConfig,
    rng: np.random.Generator,
    pool_size: Optional[int] = None,
    ess_threshold: float = 0.5,
    sites: Optional[Sequence[int]] = None,
) -> Tuple[Dict[int, SiteResult], RecyclePool, bool]:
    """
    Estimate the hybrid moments of several sites from one shared pool.

    Before estimating, the pool's ESS against the current global
    approximation is checked; below `ess_threshold * M` (or with no pool) a
    new pool is drawn from the global approximation. The recycling weight of
    each draw is multiplied by N(theta; global) / N(theta; pool proposal),
    which is 1 whenever the pool was drawn from the current global.

    Args:
        state: Current EP state
        pool: Existing pool, or None
        model: IID chunk model
        cfg: ABC options (epsilon, distance, QMC)
        rng: Randomness for a pool refresh
        pool_size: Size of a new pool (defaults to the old pool's size, else cfg.m_max)
        ess_threshold: Relative ESS below which the pool is regenerated
        sites: Sites to estimate (default 1..n)

    Returns:
        (per-site estimate or error, pool in use, refreshed flag)
    """
    if not model.iid:
        raise NonIIDModel(f"model '{model.name}' is not IID; recycling does not apply")

    target = to_moments(state.global_)
    refreshed = False
    if pool is None:
        size = pool_size or cfg.m_max
        pool = draw_pool(model, cfg, target, size, rng, ess_threshold)
        refreshed = True
        log_pool_refresh(None, size, "initial")
    else:
        ess = effective_sample_size(pool, target)
        if ess < pool.ess_threshold * pool.size:
            size = pool_size or pool.size
            pool = draw_pool(model, cfg, target, size, rng, pool.ess_threshold)
            refreshed = True
            log_pool_refresh(ess, size, "ess_below_threshold")

    log_ratio = _log_density_ratio(pool.thetas, target, pool.proposal)
    results: Dict[int, SiteResult] = {}
    for i in sites if sites is not None else range(1, model.n_chunks + 1):
        try:
            if not cavity(state.global_, state.sites[i]).is_positive_definite():
                raise EstimatorError(f"site {i}: cavity precision is not positive definite")
            results[i] = _site_estimate(i, state, pool, model, cfg, log_ratio)
        except EstimatorError as e:
            results[i] = e
        except Exception as e:  # noqa: BLE001 - a bad site must not abort the pass
            results[i] = EstimatorError(f"site {i}: {type(e).__name__}: {e}")
    return results, pool, refreshed


class RecyclingEstimator(MomentEstimator):
    """
    Moment provider backed by a shared, ESS-monitored pool.

    The pool is refreshed and the block's estimates are computed in
    `prepare_block`, which the engine calls single-threaded; `estimate` only
    reads the cached results.
    """

    def __init__(
        self,
        model: ChunkModel,
        cfg: AbcConfig,
        seed: int,
        pool_size: Optional[int] = None,
        ess_threshold: float = 0.5,
    ):
        if not model.iid:
            raise NonIIDModel(f"model '{model.name}' is not IID; recycling does not apply")
        self.model = model
        self.cfg = cfg
        self.seed = seed
        self.pool_size = pool_size or cfg.m_max
        self.ess_threshold = ess_threshold
        self.pool: Optional[RecyclePool] = None
        self.refresh_count = 0
        self.ess_refresh_count = 0
        self.ess_history: List[float] = []
        self._cache: Dict[int, SiteResult] = {}

    def prepare_block(self, state, sites: List[int], pass_index: int, block_index: int) -> None:
        had_pool = self.pool is not None
        if had_pool:
            self.ess_history.append(effective_sample_size(self.pool, to_moments(state.global_)))
        rng = np.random.default_rng([self.seed, pass_index, block_index, POOL_STREAM])
        self._cache, self.pool, refreshed = recycled_pass(
            state,
            self.pool,
            self.model,
            self.cfg,
            rng,
            pool_size=self.pool_size,
            ess_threshold=self.ess_threshold,
            sites=sites,
        )
        if refreshed:
            self.refresh_count += 1
            if had_pool:
                self.ess_refresh_count += 1

    def estimate(self, i: int, cavity: MomentParams, state, pass_index: int) -> HybridMomentEstimate:
        result = self._cache.get(i)
        if result is None:
            raise EstimatorError(f"site {i} was not prepared for this block")
        if isinstance(result, EstimatorError):
            raise result
        return result
