"""
Run configuration schema.

A run is described by one TOML file. Unknown keys are rejected, and every
validation failure is reported with its field path.
"""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from src.core.errors import EPABCError
from src.models.ep_state import Schedule, UpdatePolicy
from src.models.gaussian import (
    DimensionMismatch,
    MomentParams,
    NaturalParams,
    NotPositiveDefinite,
    to_natural,
)
from src.services.abc_estimator import AbcConfig
from src.services.spatial_extremes import MaxStableConfig


class ConfigError(EPABCError):
    """Raised when a run configuration cannot be loaded or validated."""

    code = "CONFIG_ERROR"

    def __init__(self, message: str, fields: Optional[List[str]] = None):
        super().__init__(message)
        self.fields = fields or []


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GaussSynthetic(_Section):
    """Synthetic observations drawn at a true theta."""

    theta: List[float] = Field(..., min_length=1)
    n: int = Field(..., ge=1)
    seed: int = 0


class GaussMeanConfig(_Section):
    """Gaussian-mean model: y_i ~ N(theta, noise_sd^2 I)."""

    name: Literal["gauss_mean"]
    prior_mean: List[float] = Field(..., min_length=1)
    prior_cov: List[List[float]]
    noise_sd: float = Field(default=1.0, gt=0.0)
    data_file: Optional[Path] = None
    synthetic: Optional[GaussSynthetic] = None


class AR1Synthetic(_Section):
    theta: Tuple[float, float]
    n: int = Field(..., ge=1)
    seed: int = 0


class AR1Config(_Section):
    """AR(1) model with theta = (artanh rho, log sigma)."""

    name: Literal["ar1"]
    prior_mean: List[float] = Field(..., min_length=2, max_length=2)
    prior_cov: List[List[float]]
    data_file: Optional[Path] = None
    synthetic: Optional[AR1Synthetic] = None


class MaxStableSynthetic(_Section):
    """Synthetic replicates, optionally on a random station layout."""

    theta: Tuple[float, float] = Field(..., description="True (log nu, log c)")
    n: int = Field(..., ge=1)
    seed: int = 0
    n_stations: Optional[int] = Field(default=None, ge=3)
    side: float = Field(default=100.0, gt=0.0)
    layout_seed: int = 0


class MaxStableModelConfig(_Section):
    """Max-stable model over a station layout; theta = (log nu, log c)."""

    name: Literal["max_stable"]
    prior_mean: List[float] = Field(..., min_length=2, max_length=2)
    prior_cov: List[List[float]]
    stations_file: Optional[Path] = None
    data_file: Optional[Path] = None
    synthetic: Optional[MaxStableSynthetic] = None
    spike_cap: Optional[int] = Field(default=None, ge=1)
    tail_factor: Optional[float] = Field(default=None, ge=0.0)

    @model_validator(mode="after")
    def _check_layout_source(self) -> "MaxStableModelConfig":
        if self.stations_file is None and (self.synthetic is None or self.synthetic.n_stations is None):
            raise ValueError("stations_file is required unless synthetic.n_stations is given")
        return self

    def max_stable_config(self) -> MaxStableConfig:
        options = {"spike_cap": self.spike_cap, "tail_factor": self.tail_factor}
        return MaxStableConfig(**{k: v for k, v in options.items() if v is not None})


ModelConfig = Annotated[
    Union[GaussMeanConfig, AR1Config, MaxStableModelConfig],
    Field(discriminator="name"),
]


class HeatmapConfig(_Section):
    """Grid of the correlation-distance heat map."""

    nu_min: float
    nu_max: float
    n_nu: int = Field(default=20, ge=1)
    c_min: float
    c_max: float
    n_c: int = Field(default=20, ge=1)
    scale: Literal["linear", "log"] = "linear"
    reference: Tuple[float, float] = (8.0, 4.0)
    h_max: float = Field(default=50.0, gt=0.0)
    n_quad: int = Field(default=200, ge=2)

    @model_validator(mode="after")
    def _check_bounds(self) -> "HeatmapConfig":
        if self.nu_min > self.nu_max or self.c_min > self.c_max:
            raise ValueError("grid minimum exceeds maximum")
        if self.scale == "linear" and (self.nu_min <= 0 or self.c_min <= 0):
            raise ValueError("linear grid bounds must be positive")
        if self.reference[0] <= 0 or self.reference[1] <= 0:
            raise ValueError("reference (nu0, c0) must be positive")
        return self

    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        return (
            np.linspace(self.nu_min, self.nu_max, self.n_nu),
            np.linspace(self.c_min, self.c_max, self.n_c),
        )


class CompareConfig(_Section):
    """Schedules (and seeds) compared on the same model."""

    schedules: List[Schedule] = Field(..., min_length=1)
    seeds: Optional[List[int]] = Field(default=None, min_length=1)

    @field_validator("schedules", mode="before")
    @classmethod
    def _schedule_shorthand(cls, v):
        return [{"kind": s} if isinstance(s, str) else s for s in v]


class CalibrationConfig(_Section):
    """Epsilon calibration rounds."""

    floor: float = Field(default=0.05, gt=0.0, lt=1.0)
    rounds: int = Field(default=1, ge=1)


class RunConfig(_Section):
    """One EP-ABC run. The model section may be omitted when only [heatmap] is used."""

    model: Optional[ModelConfig] = None
    epsilon: float = Field(default=float("inf"), gt=0.0)
    schedule: Schedule = Field(default_factory=Schedule.sequential)
    alpha: float = Field(default=1.0, gt=0.0, le=1.0)
    m_target: int = Field(default=500, ge=1)
    m_max: int = Field(default=1_000_000, ge=1)
    min_accept: int = Field(default=10, ge=1)
    use_qmc: bool = False
    use_recycling: bool = False
    ess_threshold: float = Field(default=0.5, gt=0.0, le=1.0)
    pool_size: Optional[int] = Field(default=None, ge=1)
    distance_weights: Optional[List[float]] = None
    max_passes: int = Field(default=10, ge=1)
    convergence_tol: float = Field(default=1e-4, gt=0.0)
    estimator: Literal["abc", "exact"] = "abc"
    seed: int = 0
    output_dir: Path = Path("output")
    ellipse_level: float = Field(default=0.5, gt=0.0, lt=1.0)
    heatmap: Optional[HeatmapConfig] = None
    compare: Optional[CompareConfig] = None
    calibration: Optional[CalibrationConfig] = None

    @field_validator("schedule", mode="before")
    @classmethod
    def _schedule_shorthand(cls, v):
        return {"kind": v} if isinstance(v, str) else v

    @model_validator(mode="after")
    def _check_combination(self) -> "RunConfig":
        if self.m_target > self.m_max:
            raise ValueError("m_target exceeds m_max")
        if self.model is None:
            return self
        if self.estimator == "exact" and self.model.name != "gauss_mean":
            raise ValueError("estimator 'exact' is only available for the gauss_mean model")
        if self.use_recycling and self.model.name == "ar1":
            raise ValueError("use_recycling needs IID chunks; the ar1 model is Markov")
        return self

    def prior(self) -> NaturalParams:
        """Prior natural parameters from prior_mean / prior_cov."""
        if self.model is None:
            raise ConfigError("model: section is required", ["model"])
        try:
            return to_natural(MomentParams(self.model.prior_mean, self.model.prior_cov))
        except (DimensionMismatch, NotPositiveDefinite, ValueError) as e:
            raise ConfigError(f"model.prior_cov: {e}", ["model.prior_cov"]) from e

    def abc_config(self, epsilon: Optional[float] = None) -> AbcConfig:
        return AbcConfig(
            epsilon=self.epsilon if epsilon is None else epsilon,
            m_target=self.m_target,
            m_max=self.m_max,
            use_qmc=self.use_qmc,
            distance_weights=self.distance_weights,
        )

    def update_policy(self) -> UpdatePolicy:
        return UpdatePolicy(
            alpha=self.alpha,
            min_accept=self.min_accept,
            max_passes=self.max_passes,
            convergence_tol=self.convergence_tol,
        )


def _resolve(base: Path, path: Optional[Path]) -> Optional[Path]:
    if path is None or path.is_absolute():
        return path
    return base / path


def _field_path(loc) -> str:
    # Drop discriminator tags pydantic inserts for tagged unions
    parts = [str(p) for p in loc if p not in ("gauss_mean", "ar1", "max_stable")]
    return ".".join(parts)


def parse_config(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    """
    Validate a configuration mapping; relative paths resolve against base_dir.

    Raises:
        ConfigError: Listing every failing field path
    """
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        fields = [_field_path(err["loc"]) or "<root>" for err in e.errors()]
        details = "; ".join(f"{f}: {err['msg']}" for f, err in zip(fields, e.errors()))
        raise ConfigError(f"invalid configuration: {details}", fields) from e

    model = cfg.model
    if model is None:
        if cfg.heatmap is None:
            raise ConfigError("model: section is required unless only [heatmap] is configured", ["model"])
        return cfg.model_copy(update={"output_dir": _resolve(base_dir, cfg.output_dir)})

    updates = {}
    for attr in ("data_file", "stations_file"):
        path = _resolve(base_dir, getattr(model, attr, None))
        if path is not None:
            if not path.is_file():
                raise ConfigError(f"model.{attr}: file not found: {path}", [f"model.{attr}"])
            updates[attr] = path
    if getattr(model, "data_file", None) is None and model.synthetic is None:
        raise ConfigError("model: either data_file or a synthetic section is required", ["model.data_file"])

    model = model.model_copy(update=updates)
    cfg = cfg.model_copy(update={"model": model, "output_dir": _resolve(base_dir, cfg.output_dir)})
    cfg.prior()
    return cfg


def load_config(path: Path) -> RunConfig:
    """
    Load and validate a TOML run configuration.

    Raises:
        ConfigError: If the file is missing, not valid TOML, or fails validation
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}", ["<file>"])
    try:
        with path.open("rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}", ["<file>"]) from e
    return parse_config(data, base_dir=path.parent)
