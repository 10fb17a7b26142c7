"""
Schemas of persisted run results.
"""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class ErrorDetail(BaseModel):
    """Error detail schema."""

    code: str = Field(..., description="Error code for programmatic handling")
    message: str = Field(..., description="Technical error message")


class ErrorResponse(BaseModel):
    """Machine-readable error printed on stderr by the CLI."""

    error: ErrorDetail


class FinalReport(BaseModel):
    """Contents of final.json."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    mean: Optional[List[float]] = Field(None, description="Posterior mean of the final approximation")
    cov: Optional[List[List[float]]] = Field(None, description="Posterior covariance")
    r: Optional[List[float]] = Field(None, description="Natural parameter r = Sigma^-1 mu")
    Q: Optional[List[List[float]]] = Field(None, description="Natural parameter Q = Sigma^-1")
    converged: bool = False
    passes_run: int = 0
    total_simulated: int = 0
    skipped_updates: int = 0
    pool_refreshes: int = 0
    schedule: str
    seed: int
    model: Dict[str, Any] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict, description="Echo of the validated config")
    error: Optional[ErrorDetail] = None


class CalibrationRow(BaseModel):
    """One epsilon calibration round."""

    round: int
    epsilon_used: float
    epsilon_proposed: float
    converged: bool
