"""
Halton-sequence quasi-Monte Carlo proposals.

Points are the unscrambled Halton sequence with the first `dim` primes as
bases. Index 1 is the first point, so base 2 starts 1/2, 1/4, 3/4, ...
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from src.models.gaussian import MomentParams


def halton_points(count: int, dim: int, start: int = 1) -> np.ndarray:
    """
    Consecutive Halton points.

    Args:
        count: Number of points
        dim: Dimension (one prime base per coordinate)
        start: Index of the first point (1 = first non-zero point)

    Returns:
        Array of shape (count, dim) with entries in (0, 1)
    """
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    if start < 1:
        raise ValueError(f"start must be at least 1, got {start}")
    sampler = qmc.Halton(d=dim, scramble=False)
    sampler.fast_forward(start)
    return sampler.random(count)


def qmc_gaussian_stream(count: int, target: MomentParams, stream_offset: int = 0) -> np.ndarray:
    """
    Map Halton points to N(mu, Sigma) by mu + L Phi^-1(u).

    Args:
        count: Number of points
        target: Gaussian to sample
        stream_offset: Number of leading Halton points to skip, so successive
            batches continue the same sequence

    Returns:
        Array of shape (count, dim)
    """
    if stream_offset < 0:
        raise ValueError(f"stream_offset must be non-negative, got {stream_offset}")
    u = halton_points(count, target.dim, start=stream_offset + 1)
    return target.mu + ndtri(u) @ target.chol.T
