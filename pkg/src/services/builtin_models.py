"""
Built-in tractable models.

GaussMean: y_i | theta ~ N(theta, sigma^2 I), identity summaries, IID chunks.
AR1: y_i | y*_{i-1}, theta ~ N(rho y*_{i-1}, sigma^2) with
theta = (artanh rho, log sigma); each chunk conditions on the observed
previous value.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import multivariate_normal

from src.models.estimates import HybridMomentEstimate, MomentEstimator
from src.models.gaussian import MomentParams, NaturalParams, to_moments, to_natural
from src.models.model_spec import ChunkModel, ModelError, load_delimited


class GaussMeanModel(ChunkModel):
    """Conjugate Gaussian-mean model with known observation noise."""

    name = "gauss_mean"

    def __init__(
        self,
        observations: np.ndarray,
        prior: NaturalParams,
        noise_sd: float = 1.0,
        seed: int = 0,
    ):
        observations = np.asarray(observations, dtype=float)
        if observations.ndim == 1:
            observations = observations[:, None]
        if observations.shape[1] != prior.dim:
            raise ModelError(
                f"observations have {observations.shape[1]} columns, prior has dimension {prior.dim}"
            )
        if noise_sd <= 0:
            raise ModelError(f"noise_sd must be positive, got {noise_sd}")
        super().__init__(prior=prior, observed_summaries=observations, iid=True, seed=seed)
        self.noise_sd = float(noise_sd)

    @classmethod
    def from_file(cls, path: Path, prior: NaturalParams, noise_sd: float = 1.0, seed: int = 0):
        """One chunk per row, one column per theta component."""
        return cls(load_delimited(path, columns=prior.dim), prior, noise_sd, seed)

    @classmethod
    def synthetic(
        cls,
        theta: np.ndarray,
        n: int,
        prior: NaturalParams,
        noise_sd: float = 1.0,
        data_seed: int = 0,
        seed: int = 0,
    ) -> "GaussMeanModel":
        """Generate n observations at a true theta."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        rng = np.random.default_rng([data_seed])
        data = theta + noise_sd * rng.standard_normal((n, theta.size))
        return cls(data, prior, noise_sd, seed)

    def simulate_batch(self, i: int, thetas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        return thetas + self.noise_sd * rng.standard_normal(thetas.shape)

    def describe(self) -> dict:
        info = super().describe()
        info["noise_sd"] = self.noise_sd
        return info


def exact_posterior(model: GaussMeanModel, data: Optional[np.ndarray] = None) -> MomentParams:
    """
    Closed-form posterior of the Gaussian-mean model.

    Args:
        model: Conjugate model supplying the prior and noise level
        data: Observations (n x p); defaults to the model's observed data.
            An empty array returns the prior.

    Returns:
        Posterior moments
    """
    data = model.observed_summaries if data is None else np.asarray(data, dtype=float)
    data = data.reshape(-1, model.theta_dim)
    precision = 1.0 / model.noise_sd**2
    Q = model.prior.Q + data.shape[0] * precision * np.eye(model.theta_dim)
    r = model.prior.r + precision * data.sum(axis=0)
    return to_moments(NaturalParams(r, Q))


class ExactGaussianEstimator(MomentEstimator):
    """Analytic hybrid moments for the Gaussian-mean model's factors."""

    def __init__(self, model: GaussMeanModel):
        self.model = model

    def estimate(self, i: int, cavity: MomentParams, state, pass_index: int) -> HybridMomentEstimate:
        y = self.model.observed_summary(i)
        noise_var = self.model.noise_sd**2
        cav = to_natural(cavity)
        precision = np.eye(self.model.theta_dim) / noise_var
        hybrid = to_moments(NaturalParams(cav.r + y / noise_var, cav.Q + precision))
        Z = multivariate_normal(mean=cavity.mu, cov=cavity.Sigma + noise_var * np.eye(cavity.dim)).pdf(y)
        return HybridMomentEstimate(
            Z_hat=float(Z),
            mu_h=hybrid.mu,
            Sigma_h=hybrid.Sigma,
            n_accepted=0,
            n_simulated=0,
            monte_carlo=False,
        )


class AR1Model(ChunkModel):
    """First-order autoregression; chunk i conditions on the observed y*_{i-1}."""

    name = "ar1"

    def __init__(self, series: np.ndarray, prior: NaturalParams, seed: int = 0):
        series = np.asarray(series, dtype=float).ravel()
        if series.size < 2:
            raise ModelError("an AR(1) series needs at least two values")
        if prior.dim != 2:
            raise ModelError(f"AR(1) theta is (artanh rho, log sigma); prior has dimension {prior.dim}")
        super().__init__(
            prior=prior,
            observed_summaries=series[1:, None],
            iid=False,
            seed=seed,
            chunk_context=series[:-1].tolist(),
        )
        self._context = np.asarray(self.chunk_context, dtype=float)

    @classmethod
    def from_file(cls, path: Path, prior: NaturalParams, seed: int = 0) -> "AR1Model":
        """Single-column file holding the series in time order."""
        return cls(load_delimited(path, columns=1)[:, 0], prior, seed)

    @classmethod
    def synthetic(
        cls,
        theta: np.ndarray,
        n: int,
        prior: NaturalParams,
        data_seed: int = 0,
        seed: int = 0,
    ) -> "AR1Model":
        """Generate a series of n + 1 values (n chunks) started at 0."""
        rho, sigma = np.tanh(theta[0]), np.exp(theta[1])
        rng = np.random.default_rng([data_seed])
        series = np.zeros(n + 1)
        for t in range(1, n + 1):
            series[t] = rho * series[t - 1] + sigma * rng.standard_normal()
        return cls(series, prior, seed)

    def simulate_batch(self, i: int, thetas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        rho = np.tanh(thetas[:, 0])
        sigma = np.exp(thetas[:, 1])
        draws = rho * self._context[i - 1] + sigma * rng.standard_normal(thetas.shape[0])
        draws = np.where(np.isfinite(draws), draws, np.nan)
        return draws[:, None]
