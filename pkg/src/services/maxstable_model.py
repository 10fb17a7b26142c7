"""
Spatial-extremes chunk model: one chunk per time replicate of d station maxima.

theta = (log nu, log c) of the Whittle-Matern correlation; the local summary
is the F-madogram regression (a, b) of the replicate.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from src.models.gaussian import NaturalParams
from src.models.model_spec import ChunkModel, ModelError, load_delimited
from src.services.spatial_extremes import (
    CorrelationModel,
    DegenerateDesign,
    MaxStableConfig,
    StationLayout,
    fmadogram_summary,
    simulate_batch_summaries,
    simulate_maxstable,
)


class MaxStableModel(ChunkModel):
    """Max-stable replicates over a fixed station layout (IID chunks)."""

    name = "max_stable"

    def __init__(
        self,
        layout: StationLayout,
        observations: np.ndarray,
        prior: NaturalParams,
        cfg: Optional[MaxStableConfig] = None,
        seed: int = 0,
    ):
        if layout.d < 3:
            raise ModelError(f"the madogram regression needs at least 3 stations, got {layout.d}")
        if not layout.has_distinct_distances:
            raise ModelError("the madogram regression needs station pairs at two or more distinct distances")
        if prior.dim != 2:
            raise ModelError(f"theta is (log nu, log c); prior has dimension {prior.dim}")
        observations = np.atleast_2d(np.asarray(observations, dtype=float))
        if observations.shape[1] != layout.d:
            raise ModelError(f"observations have {observations.shape[1]} columns for {layout.d} stations")

        summaries = []
        for row, y in enumerate(observations, start=1):
            try:
                summaries.append(fmadogram_summary(y, layout))
            except DegenerateDesign as e:
                raise ModelError(f"replicate {row}: {e}") from e

        super().__init__(prior=prior, observed_summaries=np.array(summaries), iid=True, seed=seed)
        self.layout = layout
        self.observations = observations
        self.cfg = cfg or MaxStableConfig()

    @classmethod
    def from_files(
        cls,
        stations_path: Path,
        data_path: Path,
        prior: NaturalParams,
        cfg: Optional[MaxStableConfig] = None,
        seed: int = 0,
    ) -> "MaxStableModel":
        """Stations: 2 columns (x, y). Data: d columns, one replicate per row."""
        layout = StationLayout.from_file(stations_path)
        return cls(layout, load_delimited(data_path, columns=layout.d), prior, cfg, seed)

    @classmethod
    def synthetic(
        cls,
        layout: StationLayout,
        theta: np.ndarray,
        n: int,
        prior: NaturalParams,
        cfg: Optional[MaxStableConfig] = None,
        data_seed: int = 0,
        seed: int = 0,
    ) -> "MaxStableModel":
        """n replicates simulated at a true theta = (log nu, log c)."""
        cfg = cfg or MaxStableConfig()
        corr = CorrelationModel(float(theta[0]), float(theta[1]))
        data = np.array(
            [simulate_maxstable(layout, corr, cfg, draw_index=k, seed=data_seed) for k in range(n)]
        )
        return cls(layout, data, prior, cfg, seed)

    def simulate_batch(self, i: int, thetas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return simulate_batch_summaries(self.layout, thetas, self.cfg, rng)

    def describe(self) -> dict:
        info = super().describe()
        info.update(
            stations=self.layout.d,
            spike_cap=self.cfg.spike_cap,
            tail_factor=self.cfg.tail_factor,
        )
        return info
