"""
Hybrid-moment estimates and acceptance bookkeeping shared by the estimators
and the EP engine.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from src.core.errors import EPABCError
from src.models.gaussian import MomentParams


@dataclass(frozen=True)
class AcceptanceRecord:
    """Realized summary distances of one site update, for epsilon calibration."""

    site: int
    distances: np.ndarray
    epsilon: float

    def __post_init__(self) -> None:
        distances = np.asarray(self.distances, dtype=float).ravel()
        # NaN marks a failed simulation; it never counts as accepted
        distances = np.where(np.isnan(distances), np.inf, distances)
        distances.setflags(write=False)
        object.__setattr__(self, "distances", distances)

    @property
    def n_simulated(self) -> int:
        return int(self.distances.size)

    @property
    def n_accepted(self) -> int:
        return int(np.count_nonzero(self.distances <= self.epsilon))

    def quantiles(self, probs) -> np.ndarray:
        finite = self.distances[np.isfinite(self.distances)]
        if finite.size == 0:
            return np.full(len(probs), np.inf)
        return np.quantile(finite, probs)


@dataclass(frozen=True)
class HybridMomentEstimate:
    """Moments of the hybrid distribution returned by a moment estimator."""

    Z_hat: float
    mu_h: np.ndarray
    Sigma_h: np.ndarray
    n_accepted: int
    n_simulated: int
    record: Optional[AcceptanceRecord] = field(default=None, compare=False)
    # Analytic estimates are exempt from the minimum-acceptance rule
    monte_carlo: bool = True
    # Kish effective size of weighted acceptances; None for unweighted draws
    effective_accepted: Optional[float] = None

    @property
    def accepted_support(self) -> float:
        """Acceptance count the minimum-acceptance rule is applied to."""
        if self.effective_accepted is not None:
            return self.effective_accepted
        return float(self.n_accepted)

    def __post_init__(self) -> None:
        if self.n_accepted > self.n_simulated:
            raise ValueError(
                f"n_accepted ({self.n_accepted}) exceeds n_simulated ({self.n_simulated})"
            )
        if self.Z_hat < 0:
            raise ValueError(f"Z_hat must be non-negative, got {self.Z_hat}")
        mu = np.atleast_1d(np.asarray(self.mu_h, dtype=float))
        Sigma = np.atleast_2d(np.asarray(self.Sigma_h, dtype=float))
        object.__setattr__(self, "mu_h", mu)
        object.__setattr__(self, "Sigma_h", 0.5 * (Sigma + Sigma.T))


class EstimatorError(EPABCError):
    """Base exception for hybrid-moment estimation failures.

    Subclasses may carry the acceptance record of the failed attempt so the
    engine can still use it for epsilon calibration.
    """

    code = "ESTIMATOR_ERROR"
    record: Optional[AcceptanceRecord] = None


class MomentEstimator(ABC):
    """Provider of hybrid moments for single sites."""

    def prepare_block(self, state, sites: List[int], pass_index: int, block_index: int) -> None:
        """Hook called single-threaded before the sites of a block are estimated."""

    @abstractmethod
    def estimate(self, i: int, cavity: MomentParams, state, pass_index: int) -> HybridMomentEstimate:
        """
        Estimate the hybrid moments of site i.

        Args:
            i: Site index (1-based)
            cavity: Moments of the cavity distribution (positive definite)
            state: Read-only EP state snapshot for the current block
            pass_index: Current pass (1-based), part of the randomness key

        Returns:
            HybridMomentEstimate
        """
