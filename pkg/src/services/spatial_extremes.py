"""
Max-stable process simulation over a fixed station layout.

Realizations follow Y(x) = max_k s_k max(0, Z_k(x)) with Poisson spikes
s_k = 1 / (mu Gamma_k) and IID Gaussian paths Z_k with Whittle-Matern
correlation. Each realization is summarized by the F-madogram regression
(a, b) of log|F(y_j) - F(y_k)| on log||x_j - x_k||, F the unit Frechet CDF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg
from scipy.integrate import trapezoid
from scipy.special import gammaln, kve

from src.core.config import settings
from src.core.errors import EPABCError
from src.models.model_spec import load_delimited

# E[max(0, Z)] for a standard normal Z
MU_CONST = 1.0 / math.sqrt(2.0 * math.pi)

# Log-distances closer than this (relative) are treated as one distance
LOG_DISTANCE_RTOL = 1e-9


class LayoutError(EPABCError):
    """Raised for invalid station layouts (duplicate or too few stations)."""

    code = "LAYOUT_ERROR"


class FactorizationFailure(EPABCError):
    """Raised when a correlation matrix stays singular after maximum jitter."""

    code = "FACTORIZATION_FAILURE"


class DegenerateDesign(EPABCError):
    """Raised when fewer than two usable pairs remain for the madogram regression."""

    code = "DEGENERATE_DESIGN"


@dataclass(frozen=True, eq=False)
class StationLayout:
    """Station coordinates with precomputed pairwise (log-)distances for j < k."""

    coords: np.ndarray
    distances: np.ndarray = field(init=False, repr=False)
    pairwise_log_dists: np.ndarray = field(init=False, repr=False)
    pair_index: Tuple[np.ndarray, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        coords = np.array(self.coords, dtype=float, copy=True)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 1:
            raise LayoutError(f"coords must have shape (d, 2) with d >= 1, got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise LayoutError("station coordinates must be finite")
        distances = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=-1))
        j, k = np.triu_indices(coords.shape[0], k=1)
        pair_dists = distances[j, k]
        if np.any(pair_dists <= 0):
            bad = int(np.argmin(pair_dists))
            raise LayoutError(f"stations {j[bad]} and {k[bad]} share coordinates")
        for name, value in (
            ("coords", coords),
            ("distances", distances),
            ("pairwise_log_dists", np.log(pair_dists)),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "pair_index", (j, k))

    @property
    def d(self) -> int:
        return self.coords.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.pairwise_log_dists.size

    @property
    def key(self) -> bytes:
        return self.coords.tobytes()

    @property
    def has_distinct_distances(self) -> bool:
        """True when at least two pair distances differ beyond rounding."""
        x = self.pairwise_log_dists
        return x.size >= 2 and bool(np.ptp(x) > LOG_DISTANCE_RTOL * (1.0 + np.max(np.abs(x))))

    @classmethod
    def from_file(cls, path: Path) -> "StationLayout":
        """Two-column (x, y) delimited file, one station per row."""
        return cls(load_delimited(path, columns=2))

    @classmethod
    def synthetic(cls, d: int, side: float = 100.0, seed: int = 0) -> "StationLayout":
        """d stations uniform in a square of the given side."""
        if d < 1 or side <= 0:
            raise LayoutError(f"need d >= 1 and side > 0, got d={d}, side={side}")
        rng = np.random.default_rng([seed])
        return cls(rng.uniform(0.0, side, size=(d, 2)))


@dataclass(frozen=True)
class CorrelationModel:
    """Whittle-Matern parameters on the unconstrained scale (log nu, log c)."""

    log_nu: float
    log_c: float

    def __post_init__(self) -> None:
        for name in ("log_nu", "log_c"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or not 0.0 < math.exp(value) < math.inf:
                raise ValueError(f"exp({name}) must be finite and positive, got {name}={value}")
            object.__setattr__(self, name, value)

    @property
    def nu(self) -> float:
        return math.exp(self.log_nu)

    @property
    def c(self) -> float:
        return math.exp(self.log_c)

    @classmethod
    def from_natural(cls, nu: float, c: float) -> "CorrelationModel":
        return cls(math.log(nu), math.log(c))


class MaxStableConfig(BaseModel):
    """Truncation of the spike series."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    spike_cap: int = Field(default_factory=lambda: settings.SPIKE_CAP, ge=1)
    tail_factor: float = Field(
        default_factory=lambda: settings.TAIL_FACTOR,
        ge=0.0,
        description="Stop once s_k * tail_factor <= min running maximum; 0 keeps the first spike only"
    )

    @property
    def mu_const(self) -> float:
        return MU_CONST


def whittle_matern(h, nu, c) -> np.ndarray:
    """
    Whittle-Matern correlation (2^(1-nu) / Gamma(nu)) (h/c)^nu K_nu(h/c).

    Evaluated in log space with the exponentially scaled Bessel function, so
    large arguments underflow cleanly to 0. Broadcasts over its arguments;
    rho(0) = 1.
    """
    h = np.abs(np.asarray(h, dtype=float))
    nu = np.asarray(nu, dtype=float)
    c = np.asarray(c, dtype=float)
    z = h / c
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_rho = (
            (1.0 - nu) * math.log(2.0)
            - gammaln(nu)
            + nu * np.log(z)
            + np.log(kve(nu, z))
            - z
        )
        rho = np.exp(log_rho)
    # z -> 0 (or a K_nu overflow at tiny z) is the unit limit
    rho = np.where((z == 0) | np.isnan(rho) | np.isinf(rho), 1.0, rho)
    return np.clip(rho, 0.0, 1.0)


def correlation_matrix(layout: StationLayout, corr: CorrelationModel) -> np.ndarray:
    """Station correlation matrix with unit diagonal."""
    R = whittle_matern(layout.distances, corr.nu, corr.c)
    np.fill_diagonal(R, 1.0)
    return R


def _jittered_cholesky(R: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(R, lower=True)
    except linalg.LinAlgError:
        pass
    jitter = settings.JITTER_START
    eye = np.eye(R.shape[0])
    while jitter <= settings.JITTER_MAX * (1 + 1e-9):
        try:
            return linalg.cholesky(R + jitter * eye, lower=True)
        except linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationFailure(
        f"correlation matrix not positive definite after jitter {settings.JITTER_MAX:g}"
    )


@lru_cache(maxsize=settings.CHOLESKY_CACHE_SIZE)
def _cached_cholesky(layout_key: bytes, d: int, log_nu: float, log_c: float) -> np.ndarray:
    layout = StationLayout(np.frombuffer(layout_key, dtype=float).reshape(d, 2))
    L = _jittered_cholesky(correlation_matrix(layout, CorrelationModel(log_nu, log_c)))
    L.setflags(write=False)
    return L


def correlation_cholesky(layout: StationLayout, corr: CorrelationModel) -> np.ndarray:
    """
    Lower Cholesky factor of the (jittered) correlation matrix, memoized per
    (layout, theta).

    Raises:
        FactorizationFailure: If maximum jitter does not make the matrix positive definite
    """
    return _cached_cholesky(layout.key, layout.d, corr.log_nu, corr.log_c)


def cholesky_batch(layout: StationLayout, thetas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cholesky factors for a batch of theta = (log nu, log c) rows.

    Returns:
        (factors of shape (M, d, d), boolean mask of rows that factorized)
    """
    thetas = np.atleast_2d(thetas)
    M, d = thetas.shape[0], layout.d
    ok = np.all(np.isfinite(thetas), axis=1)
    with np.errstate(over="ignore"):
        nus = np.exp(thetas[:, 0])
        cs = np.exp(thetas[:, 1])
    ok &= np.isfinite(nus) & np.isfinite(cs) & (nus > 0) & (cs > 0)

    factors = np.zeros((M, d, d))
    stack = np.repeat(np.eye(d)[None], M, axis=0)
    if np.any(ok):
        R = whittle_matern(layout.distances[None], nus[ok, None, None], cs[ok, None, None])
        R[:, np.arange(d), np.arange(d)] = 1.0
        stack[ok] = R
    try:
        factors[ok] = np.linalg.cholesky(stack[ok])
        return factors, ok
    except np.linalg.LinAlgError:
        pass
    # Some matrix needs jitter; fall back to the per-theta ladder
    for m in np.flatnonzero(ok):
        try:
            factors[m] = _jittered_cholesky(stack[m])
        except FactorizationFailure:
            ok[m] = False
    return factors, ok


def gp_sample(
    layout: StationLayout,
    corr: CorrelationModel,
    draw_index: int,
    seed: int = 0,
) -> np.ndarray:
    """One zero-mean unit-variance Gaussian path at the stations, keyed by (seed, draw_index)."""
    L = correlation_cholesky(layout, corr)
    rng = np.random.default_rng([seed, draw_index])
    return L @ rng.standard_normal(layout.d)


def maxstable_from_factors(
    factors: np.ndarray,
    cfg: MaxStableConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Simulate one truncated max-stable realization per Cholesky factor.

    Spikes are generated in decreasing order; realization m stops when its
    spike times tail_factor no longer exceeds the smallest station maximum,
    or after spike_cap spikes.

    Args:
        factors: Stack (M, d, d) of lower Cholesky factors
        cfg: Truncation options
        rng: Randomness for the spike arrivals and Gaussian paths

    Returns:
        Array (M, d) of realizations
    """
    M, d = factors.shape[0], factors.shape[1]
    arrivals = np.zeros(M)
    running = np.zeros((M, d))
    active = np.arange(M)
    for _ in range(cfg.spike_cap):
        if active.size == 0:
            break
        arrivals[active] += rng.standard_exponential(active.size)
        spikes = 1.0 / (cfg.mu_const * arrivals[active])
        paths = np.einsum("mij,mj->mi", factors[active], rng.standard_normal((active.size, d)))
        running[active] = np.maximum(running[active], spikes[:, None] * np.maximum(paths, 0.0))
        done = spikes * cfg.tail_factor <= running[active].min(axis=1)
        active = active[~done]
    return running


def simulate_maxstable(
    layout: StationLayout,
    corr: CorrelationModel,
    cfg: MaxStableConfig,
    draw_index: int,
    seed: int = 0,
) -> np.ndarray:
    """One realization at the stations, keyed by (seed, draw_index)."""
    L = correlation_cholesky(layout, corr)
    rng = np.random.default_rng([seed, draw_index])
    return maxstable_from_factors(L[None], cfg, rng)[0]


def frechet_cdf(y: np.ndarray) -> np.ndarray:
    """Unit Frechet CDF exp(-1/y), 0 for y <= 0."""
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(y > 0, np.exp(-1.0 / np.where(y > 0, y, 1.0)), 0.0)


def fmadogram_batch(Y: np.ndarray, layout: StationLayout) -> np.ndarray:
    """
    Madogram regression coefficients for each row of Y.

    Rows with fewer than two usable (untied) pairs, a constant design or
    non-finite values give a NaN row.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    j, k = layout.pair_index
    F = frechet_cdf(Y)
    with np.errstate(divide="ignore", invalid="ignore"):
        resp = np.log(np.abs(F[:, j] - F[:, k]))
    usable = np.isfinite(resp)
    x = np.broadcast_to(layout.pairwise_log_dists, resp.shape)
    w = usable.astype(float)
    resp = np.where(usable, resp, 0.0)

    n = w.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_bar = (w * x).sum(axis=1) / n
        y_bar = (w * resp).sum(axis=1) / n
        dx = np.where(usable, x - x_bar[:, None], 0.0)
        sxx = (dx * dx).sum(axis=1)
        sxy = (dx * np.where(usable, resp - y_bar[:, None], 0.0)).sum(axis=1)
        b = sxy / sxx
        a = y_bar - b * x_bar
    out = np.column_stack([a, b])
    spread = np.max(np.where(usable, x, -np.inf), axis=1) - np.min(np.where(usable, x, np.inf), axis=1)
    flat = ~(spread > LOG_DISTANCE_RTOL * (1.0 + np.max(np.abs(x), axis=1)))
    bad = (n < 2) | flat | ~(sxx > 0) | ~np.all(np.isfinite(Y), axis=1)
    out[bad] = np.nan
    return out


def fmadogram_summary(y: Sequence[float], layout: StationLayout) -> np.ndarray:
    """
    OLS intercept and slope (a, b) of log|F(y_j) - F(y_k)| on log||x_j - x_k||.

    Pairs with exactly equal F values are dropped.

    Raises:
        DegenerateDesign: If fewer than two usable pairs (or one distinct distance) remain
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size != layout.d:
        raise ValueError(f"{y.size} values for {layout.d} stations")
    result = fmadogram_batch(y[None], layout)[0]
    if np.any(np.isnan(result)):
        raise DegenerateDesign(
            "madogram regression needs at least two untied pairs at two distinct distances"
        )
    return result


@dataclass(frozen=True)
class HeatmapGrid:
    """Integrated absolute correlation difference over a parameter grid."""

    nu_axis: np.ndarray
    c_axis: np.ndarray
    values: np.ndarray
    scale: str
    reference: Tuple[float, float]


def correlation_distance_grid(
    nu_values: Sequence[float],
    c_values: Sequence[float],
    reference: Tuple[float, float] = (8.0, 4.0),
    h_max: float = 50.0,
    n_quad: int = 200,
    scale: Literal["linear", "log"] = "linear",
) -> HeatmapGrid:
    """
    Integral over [0, h_max] of |rho_(nu,c)(h) - rho_ref(h)| on a grid.

    Args:
        nu_values: Grid axis for nu (or log nu when scale="log")
        c_values: Grid axis for c (or log c when scale="log")
        reference: Reference (nu0, c0) on the natural scale; added to the axes
        h_max: Upper integration limit
        n_quad: Number of trapezoid nodes (>= 2)
        scale: Whether the axes are natural or log parameters

    Returns:
        HeatmapGrid whose axes are sorted and contain the reference
    """
    if n_quad < 2:
        raise ValueError(f"n_quad must be at least 2, got {n_quad}")
    if h_max <= 0:
        raise ValueError(f"h_max must be positive, got {h_max}")
    if len(nu_values) == 0 or len(c_values) == 0:
        raise ValueError("grid axes must be non-empty")
    if scale not in ("linear", "log"):
        raise ValueError(f"unknown scale '{scale}'")

    ref_axis = (math.log(reference[0]), math.log(reference[1])) if scale == "log" else reference
    nu_axis = np.union1d(np.asarray(nu_values, dtype=float), [ref_axis[0]])
    c_axis = np.union1d(np.asarray(c_values, dtype=float), [ref_axis[1]])
    to_natural = np.exp if scale == "log" else (lambda v: v)

    h = np.linspace(0.0, h_max, n_quad)
    ref_nu, ref_c = to_natural(np.asarray(ref_axis[0])), to_natural(np.asarray(ref_axis[1]))
    rho_ref = whittle_matern(h, ref_nu, ref_c)
    rho = whittle_matern(
        h[None, None, :],
        to_natural(nu_axis)[:, None, None],
        to_natural(c_axis)[None, :, None],
    )
    values = trapezoid(np.abs(rho - rho_ref), h, axis=-1)
    return HeatmapGrid(nu_axis=nu_axis, c_axis=c_axis, values=values, scale=scale, reference=tuple(reference))


def simulate_batch_summaries(
    layout: StationLayout,
    thetas: np.ndarray,
    cfg: MaxStableConfig,
    rng: np.random.Generator,
    chunk_size: Optional[int] = None,
) -> np.ndarray:
    """Madogram summaries of one realization per theta row; NaN rows for failures."""
    thetas = np.atleast_2d(thetas)
    chunk_size = chunk_size or settings.ABC_BATCH_SIZE
    out = np.full((thetas.shape[0], 2), np.nan)
    for start in range(0, thetas.shape[0], chunk_size):
        part = slice(start, start + chunk_size)
        factors, ok = cholesky_batch(layout, thetas[part])
        summaries = np.full((ok.size, 2), np.nan)
        if np.any(ok):
            summaries[ok] = fmadogram_batch(maxstable_from_factors(factors[ok], cfg, rng), layout)
        out[part] = summaries
    return out
