"""
EP state, schedule and update-policy types.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.models.estimates import AcceptanceRecord
from src.models.gaussian import NaturalParams, sum_sites, to_moments

ScheduleKind = Literal["sequential", "parallel", "block_parallel"]


class Schedule(BaseModel):
    """Order of site updates."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ScheduleKind = Field(default="sequential", description="Update schedule")
    n_core: Optional[int] = Field(
        default=None,
        gt=0,
        description="Block size for the block-parallel schedule"
    )

    @model_validator(mode="after")
    def _check_n_core(self) -> "Schedule":
        if self.kind == "block_parallel" and self.n_core is None:
            raise ValueError("n_core is required for the block_parallel schedule")
        return self

    @classmethod
    def sequential(cls) -> "Schedule":
        return cls(kind="sequential")

    @classmethod
    def parallel(cls) -> "Schedule":
        return cls(kind="parallel")

    @classmethod
    def block_parallel(cls, n_core: int) -> "Schedule":
        return cls(kind="block_parallel", n_core=n_core)

    def block_size(self, n_chunks: int) -> int:
        """Number of consecutive site indices (prior included) per block."""
        if self.kind == "sequential":
            return 1
        if self.kind == "parallel":
            return n_chunks + 1
        return self.n_core

    def blocks(self, n_chunks: int) -> List[List[int]]:
        """Blocks of site indices 0..n in index order; site 0 is the fixed prior."""
        size = self.block_size(n_chunks)
        indices = list(range(n_chunks + 1))
        return [indices[k:k + size] for k in range(0, n_chunks + 1, size)]

    @property
    def label(self) -> str:
        if self.kind == "block_parallel":
            return f"block_parallel({self.n_core})"
        return self.kind


class UpdatePolicy(BaseModel):
    """Fractional step, acceptance floor and stopping rule of an EP run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: float = Field(default=1.0, gt=0.0, le=1.0, description="Fractional update weight")
    min_accept: int = Field(default=10, ge=1, description="Minimum acceptances for an update")
    max_passes: int = Field(default=10, ge=1, description="Maximum passes over the sites")
    convergence_tol: float = Field(default=1e-4, gt=0.0, description="Convergence threshold")


@dataclass(frozen=True)
class EPState:
    """Site natural parameters (site 0 is the prior) and their sum."""

    sites: Tuple[NaturalParams, ...]
    global_: NaturalParams

    @classmethod
    def initial(cls, prior: NaturalParams, n_chunks: int) -> "EPState":
        """Prior as site 0, flat likelihood sites, global equal to the prior."""
        sites = (prior,) + tuple(NaturalParams.zeros(prior.dim) for _ in range(n_chunks))
        return cls(sites=sites, global_=sum_sites(sites))

    @property
    def n_chunks(self) -> int:
        return len(self.sites) - 1

    def sum_residual(self) -> float:
        """Infinity-norm distance between the global parameter and the site sum."""
        return self.global_.max_abs_diff(sum_sites(self.sites))

    def equals(self, other: "EPState") -> bool:
        return (
            len(self.sites) == len(other.sites)
            and all(a.equals(b) for a, b in zip(self.sites, other.sites))
            and self.global_.equals(other.global_)
        )


@dataclass(frozen=True)
class UpdateRecord:
    """One attempted site update."""

    pass_index: int
    site: int
    mean: np.ndarray
    cov: np.ndarray
    n_accepted: int
    n_simulated: int
    skipped: bool
    reason: str = ""
    wall_clock_s: float = 0.0


@dataclass
class EPTrace:
    """Per-update records plus the final state of an EP run."""

    records: List[UpdateRecord] = field(default_factory=list)
    state: Optional[EPState] = None
    converged: bool = False
    passes_run: int = 0
    acceptance: Dict[int, AcceptanceRecord] = field(default_factory=dict)
    pool_refreshes: int = 0
    error: Optional[str] = None

    @property
    def total_simulated(self) -> int:
        return sum(r.n_simulated for r in self.records)

    def pass_means(self) -> List[np.ndarray]:
        """Global mean at the end of each pass (last record of each pass)."""
        last: Dict[int, np.ndarray] = {}
        for rec in self.records:
            last[rec.pass_index] = rec.mean
        return [last[k] for k in sorted(last)]

    def final_moments(self):
        if self.state is None:
            return None
        return to_moments(self.state.global_)
