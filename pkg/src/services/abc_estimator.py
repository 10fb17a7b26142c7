"""
Local rejection-ABC estimation of hybrid moments.

For site i, parameters are drawn from the cavity, one chunk is simulated per
draw, and draws whose summary lies within epsilon of the observed summary are
accepted. The accepted draws' mean and covariance estimate the hybrid moments.
"""

from __future__ import annotations

import math
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.config import settings
from src.models.estimates import (
    AcceptanceRecord,
    EstimatorError,
    HybridMomentEstimate,
    MomentEstimator,
)
from src.models.gaussian import MomentParams
from src.models.model_spec import ChunkModel
from src.services.qmc import qmc_gaussian_stream

RngKey = Tuple[int, ...]


class InsufficientAcceptances(EstimatorError):
    """Raised when the simulation cap is hit before m_target acceptances."""

    code = "INSUFFICIENT_ACCEPTANCES"

    def __init__(self, message: str, record: AcceptanceRecord, partial: Optional[HybridMomentEstimate] = None):
        super().__init__(message)
        self.record = record
        self.partial = partial


class CavityNotPositiveDefinite(EstimatorError):
    """Raised when a cavity cannot serve as a proposal distribution."""

    code = "CAVITY_NOT_POSITIVE_DEFINITE"


class EmptyRecords(EstimatorError):
    """Raised when epsilon calibration receives no acceptance records."""

    code = "EMPTY_RECORDS"


class AbcConfig(BaseModel):
    """Tolerance, acceptance budget and proposal options of the local ABC step."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    epsilon: float = Field(..., gt=0.0, description="ABC tolerance (may be +inf)")
    m_target: int = Field(default=500, ge=1, description="Acceptances required per site update")
    m_max: int = Field(default=1_000_000, ge=1, description="Simulation cap per site update")
    use_qmc: bool = Field(default=False, description="Draw proposals from a Halton stream")
    distance_weights: Optional[List[float]] = Field(
        default=None,
        description="Per-component weights of the Euclidean summary distance"
    )
    batch_size: int = Field(default_factory=lambda: settings.ABC_BATCH_SIZE, ge=1)
    qmc_burn_in: int = Field(default_factory=lambda: settings.QMC_BURN_IN, ge=0)

    @model_validator(mode="after")
    def _check_budget(self) -> "AbcConfig":
        if self.m_target > self.m_max:
            raise ValueError(f"m_target ({self.m_target}) exceeds m_max ({self.m_max})")
        if self.distance_weights is not None and any(w < 0 for w in self.distance_weights):
            raise ValueError("distance_weights must be non-negative")
        return self


def summary_distance(
    summaries: np.ndarray,
    observed: np.ndarray,
    weights: Optional[Sequence[float]] = None
) -> np.ndarray:
    """
    Weighted Euclidean distance of each summary row to the observed summary.

    Rows containing NaN (failed simulations) get distance +inf.
    """
    summaries = np.atleast_2d(summaries)
    diff = summaries - observed
    w = np.ones(diff.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    if w.size != diff.shape[1]:
        raise ValueError(f"{w.size} distance weights for {diff.shape[1]} summary components")
    dist = np.sqrt(np.sum(w * diff**2, axis=1))
    return np.where(np.isnan(dist), np.inf, dist)


def weighted_moments(thetas: np.ndarray, weights: Optional[np.ndarray] = None):
    """Mean and (biased) covariance of the rows of `thetas`."""
    if weights is None:
        mu = thetas.mean(axis=0)
        second = thetas.T @ thetas / thetas.shape[0]
    else:
        w = weights / weights.sum()
        mu = w @ thetas
        second = (thetas * w[:, None]).T @ thetas
    return mu, second - np.outer(mu, mu)


def _proposals(
    cavity: MomentParams,
    count: int,
    cfg: AbcConfig,
    drawn: int,
    rng: np.random.Generator
) -> np.ndarray:
    if cfg.use_qmc:
        return qmc_gaussian_stream(count, cavity, stream_offset=cfg.qmc_burn_in + drawn)
    return cavity.mu + rng.standard_normal((count, cavity.dim)) @ cavity.chol.T


def estimate_site_moments(
    i: int,
    cavity: MomentParams,
    model: ChunkModel,
    cfg: AbcConfig,
    rng_key: RngKey,
) -> HybridMomentEstimate:
    """
    Rejection-ABC estimate of the hybrid moments of site i.

    Simulates in batches until m_target draws are accepted or m_max draws
    have been simulated. Batch b uses the generator keyed by (*rng_key, b),
    so results do not depend on how sites are spread over workers.

    Args:
        i: Site index (1-based)
        cavity: Cavity moments, used as the proposal
        model: Chunk model supplying the simulator and observed summary
        cfg: ABC options
        rng_key: (seed, pass, site)

    Returns:
        HybridMomentEstimate with the accepted draws' mean and covariance

    Raises:
        InsufficientAcceptances: If m_max is reached with fewer than m_target acceptances
    """
    if not isinstance(cavity, MomentParams):
        raise CavityNotPositiveDefinite(f"site {i}: cavity is not a valid Gaussian")

    observed = model.observed_summary(i)
    accepted: List[np.ndarray] = []
    distances: List[np.ndarray] = []
    n_accepted = 0
    drawn = 0
    batch = 0

    while n_accepted < cfg.m_target and drawn < cfg.m_max:
        count = min(cfg.batch_size, cfg.m_max - drawn)
        rng = np.random.default_rng([*rng_key, batch])
        thetas = _proposals(cavity, count, cfg, drawn, rng)
        summaries = model.simulate_batch(i, thetas, rng)
        dist = summary_distance(summaries, observed, cfg.distance_weights)
        keep = dist <= cfg.epsilon
        accepted.append(thetas[keep])
        distances.append(dist)
        n_accepted += int(np.count_nonzero(keep))
        drawn += count
        batch += 1

    record = AcceptanceRecord(site=i, distances=np.concatenate(distances), epsilon=cfg.epsilon)
    partial = None
    if n_accepted > 0:
        mu_h, Sigma_h = weighted_moments(np.concatenate(accepted))
        partial = HybridMomentEstimate(
            Z_hat=n_accepted / drawn,
            mu_h=mu_h,
            Sigma_h=Sigma_h,
            n_accepted=n_accepted,
            n_simulated=drawn,
            record=record,
        )

    if n_accepted < cfg.m_target:
        raise InsufficientAcceptances(
            f"site {i}: {n_accepted} acceptances after {drawn} simulations (target {cfg.m_target})",
            record=record,
            partial=partial,
        )
    return partial


class AbcEstimator(MomentEstimator):
    """Rejection-ABC moment provider keyed by (seed, pass, site)."""

    def __init__(self, model: ChunkModel, cfg: AbcConfig, seed: int):
        self.model = model
        self.cfg = cfg
        self.seed = seed

    def estimate(self, i: int, cavity: MomentParams, state, pass_index: int) -> HybridMomentEstimate:
        return estimate_site_moments(i, cavity, self.model, self.cfg, (self.seed, pass_index, i))


def calibrate_epsilon(records: Iterable[AcceptanceRecord], floor: float) -> float:
    """
    Smallest epsilon giving every site an acceptance rate of at least `floor`.

    Each site's threshold is the k-th smallest of its distances with
    k = ceil(floor * n_simulated); the result is the maximum over sites.

    Raises:
        EmptyRecords: If no records are given
    """
    if not 0.0 < floor < 1.0:
        raise ValueError(f"floor must lie in (0, 1), got {floor}")
    records = list(records)
    if not records:
        raise EmptyRecords("epsilon calibration needs at least one acceptance record")

    thresholds = []
    for rec in records:
        if rec.n_simulated < 1:
            raise EmptyRecords(f"site {rec.site} has no simulated distances")
        k = max(1, math.ceil(floor * rec.n_simulated - 1e-9))
        thresholds.append(float(np.partition(rec.distances, k - 1)[k - 1]))
    return max(thresholds)
