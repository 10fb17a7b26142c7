"""
Gaussian exponential-family algebra.

A Gaussian q(theta) ∝ exp{-1/2 theta' Q theta + r' theta} is stored by its
natural parameters (r, Q). Natural parameters are additive across sites, so
the global approximation is the sum of the site parameters and the cavity for
site i is a plain subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import chi2

from src.core.errors import EPABCError


class NotPositiveDefinite(EPABCError):
    """Raised when a symmetric factorization of a precision/covariance fails."""

    code = "NOT_POSITIVE_DEFINITE"


class DimensionMismatch(EPABCError):
    """Raised when two parameter sets have different dimensions."""

    code = "DIMENSION_MISMATCH"


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _as_square(matrix, p: int, name: str) -> np.ndarray:
    out = np.array(matrix, dtype=float, copy=True)
    if out.ndim == 0:
        out = out.reshape(1, 1)
    if out.shape != (p, p):
        raise DimensionMismatch(f"{name} has shape {out.shape}, expected ({p}, {p})")
    return out


def _cholesky(matrix: np.ndarray, what: str):
    try:
        return linalg.cho_factor(matrix, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as e:
        raise NotPositiveDefinite(f"{what} is not positive definite: {e}") from e


@dataclass(frozen=True, eq=False)
class NaturalParams:
    """Natural parameters (r, Q) of a Gaussian site or global approximation.

    Q need not be positive definite: site parameters are routinely indefinite.
    """

    r: np.ndarray
    Q: np.ndarray

    def __post_init__(self) -> None:
        r = np.atleast_1d(np.array(self.r, dtype=float, copy=True))
        if r.ndim != 1 or r.size < 1:
            raise DimensionMismatch(f"r must be a non-empty vector, got shape {r.shape}")
        Q = _as_square(self.Q, r.size, "Q")
        object.__setattr__(self, "r", _frozen(r))
        object.__setattr__(self, "Q", _frozen(_symmetrize(Q)))

    @property
    def dim(self) -> int:
        return self.r.size

    @classmethod
    def zeros(cls, dim: int) -> "NaturalParams":
        """Flat (zero) site."""
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    def is_positive_definite(self) -> bool:
        """True when Q admits a Cholesky factorization."""
        try:
            _cholesky(self.Q, "Q")
        except NotPositiveDefinite:
            return False
        return True

    def max_abs_diff(self, other: "NaturalParams") -> float:
        _check_dims(self, other)
        return float(max(np.max(np.abs(self.r - other.r)), np.max(np.abs(self.Q - other.Q))))

    def equals(self, other: "NaturalParams") -> bool:
        """Bit-for-bit equality."""
        return (
            self.dim == other.dim
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.Q, other.Q)
        )


@dataclass(frozen=True, eq=False)
class MomentParams:
    """Mean/covariance parameters (mu, Sigma); Sigma must be positive definite."""

    mu: np.ndarray
    Sigma: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        mu = np.atleast_1d(np.array(self.mu, dtype=float, copy=True))
        if mu.ndim != 1 or mu.size < 1:
            raise DimensionMismatch(f"mu must be a non-empty vector, got shape {mu.shape}")
        Sigma = _symmetrize(_as_square(self.Sigma, mu.size, "Sigma"))
        c, _ = _cholesky(Sigma, "Sigma")
        object.__setattr__(self, "mu", _frozen(mu))
        object.__setattr__(self, "Sigma", _frozen(Sigma))
        object.__setattr__(self, "chol", _frozen(np.tril(c)))

    @property
    def dim(self) -> int:
        return self.mu.size

    def log_det(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.chol))))


def _check_dims(a, b) -> None:
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimension mismatch: {a.dim} vs {b.dim}")


def to_moments(np_: NaturalParams) -> MomentParams:
    """
    Convert natural parameters to moments: Sigma = Q^-1, mu = Q^-1 r.

    Args:
        np_: Natural parameters with positive definite Q

    Returns:
        MomentParams

    Raises:
        NotPositiveDefinite: If Q cannot be factorized
    """
    factor = _cholesky(np_.Q, "precision Q")
    Sigma = linalg.cho_solve(factor, np.eye(np_.dim))
    mu = linalg.cho_solve(factor, np_.r)
    return MomentParams(mu, _symmetrize(Sigma))


def to_natural(mp: MomentParams) -> NaturalParams:
    """
    Convert moments to natural parameters: Q = Sigma^-1, r = Sigma^-1 mu.

    Raises:
        NotPositiveDefinite: If Sigma cannot be factorized
    """
    factor = _cholesky(mp.Sigma, "covariance Sigma")
    Q = linalg.cho_solve(factor, np.eye(mp.dim))
    r = linalg.cho_solve(factor, mp.mu)
    return NaturalParams(r, Q)


def cavity(global_: NaturalParams, site: NaturalParams) -> NaturalParams:
    """Divide site out of the global approximation: (r - r_i, Q - Q_i)."""
    _check_dims(global_, site)
    return NaturalParams(global_.r - site.r, global_.Q - site.Q)


def add(global_: NaturalParams, site: NaturalParams) -> NaturalParams:
    """Multiply a site into an approximation: (r + r_i, Q + Q_i)."""
    _check_dims(global_, site)
    return NaturalParams(global_.r + site.r, global_.Q + site.Q)


def sum_sites(sites) -> NaturalParams:
    """Sum a sequence of natural parameters in index order."""
    sites = list(sites)
    if not sites:
        raise ValueError("cannot sum an empty list of sites")
    r = np.sum(np.stack([s.r for s in sites]), axis=0)
    Q = np.sum(np.stack([s.Q for s in sites]), axis=0)
    return NaturalParams(r, Q)


def kl_gaussian(p: MomentParams, q: MomentParams) -> float:
    """
    Closed-form KL(p || q) between two Gaussians.

    Returns:
        Non-negative divergence
    """
    _check_dims(p, q)
    k = p.dim
    q_factor = (q.chol, True)
    trace_term = float(np.trace(linalg.cho_solve(q_factor, p.Sigma)))
    diff = q.mu - p.mu
    maha = float(diff @ linalg.cho_solve(q_factor, diff))
    kl = 0.5 * (trace_term + maha - k + q.log_det() - p.log_det())
    return max(kl, 0.0)


def symmetric_kl(p: MomentParams, q: MomentParams) -> float:
    return kl_gaussian(p, q) + kl_gaussian(q, p)


def credible_ellipse(mp: MomentParams, level: float = 0.5, n_points: int = 100) -> np.ndarray:
    """
    Boundary of the level-`level` credible ellipse of a bivariate Gaussian.

    Args:
        mp: A 2-dimensional Gaussian
        level: Probability mass inside the ellipse, in (0, 1)
        n_points: Number of boundary points

    Returns:
        Array of shape (n_points, 2)
    """
    if mp.dim != 2:
        raise DimensionMismatch(f"credible ellipse needs a 2-d Gaussian, got {mp.dim}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    radius = np.sqrt(chi2.ppf(level, df=2))
    angles = np.linspace(0.0, 2.0 * np.pi, n_points)
    circle = np.stack([np.cos(angles), np.sin(angles)])
    return (mp.mu[:, None] + radius * mp.chol @ circle).T
