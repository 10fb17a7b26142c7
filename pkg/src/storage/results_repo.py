"""
Results repository: writes run outputs as flat CSV files plus final.json.
"""

import csv
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from src.core.logging import logger
from src.models.ep_state import EPTrace
from src.schemas.results import CalibrationRow, FinalReport
from src.services.spatial_extremes import HeatmapGrid

ACCEPTANCE_PROBS = (0.01, 0.05, 0.1, 0.25, 0.5)


def _num(value: float) -> str:
    # Shortest round-trip repr keeps files byte-stable across runs
    return repr(float(value))


class ResultsRepository:
    """Repository for the output files of one run directory."""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)

    def _write_rows(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / name
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        logger.info(f"WROTE | {path}")
        return path

    def write_trace(self, trace: EPTrace, dim: int) -> Path:
        """One row per attempted site update: global mean and covariance after its block."""
        header = ["pass", "site"]
        header += [f"mean_{a}" for a in range(dim)]
        header += [f"cov_{a}_{b}" for a in range(dim) for b in range(a, dim)]
        header += ["n_accepted", "n_simulated", "skipped", "reason"]
        upper = np.triu_indices(dim)
        rows = (
            [rec.pass_index, rec.site]
            + [_num(v) for v in rec.mean]
            + [_num(v) for v in rec.cov[upper]]
            + [rec.n_accepted, rec.n_simulated, str(rec.skipped).lower(), rec.reason]
            for rec in trace.records
        )
        return self._write_rows("trace.csv", header, rows)

    def write_timing(self, trace: EPTrace) -> Path:
        """Wall-clock seconds per update, kept apart from trace.csv so the trace stays reproducible."""
        rows = ([rec.pass_index, rec.site, f"{rec.wall_clock_s:.6f}"] for rec in trace.records)
        return self._write_rows("timing.csv", ["pass", "site", "wall_clock_s"], rows)

    def write_acceptance(self, trace: EPTrace) -> Path:
        """Per-site distance quantiles of the latest acceptance record."""
        header = ["site", "epsilon", "n_simulated", "n_accepted"] + [f"q{p:g}" for p in ACCEPTANCE_PROBS]
        rows = []
        for site in sorted(trace.acceptance):
            rec = trace.acceptance[site]
            rows.append(
                [site, _num(rec.epsilon), rec.n_simulated, rec.n_accepted]
                + [_num(q) for q in rec.quantiles(ACCEPTANCE_PROBS)]
            )
        return self._write_rows("acceptance.csv", header, rows)

    def write_final(self, report: FinalReport) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / "final.json"
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        logger.info(f"WROTE | {path}")
        return path

    def write_ellipse(self, points: np.ndarray) -> Path:
        rows = ([_num(x), _num(y)] for x, y in points)
        return self._write_rows("ellipse.csv", ["theta_0", "theta_1"], rows)

    def write_heatmap(self, grid: HeatmapGrid) -> Path:
        """Rows of (nu, c, log nu, log c, integral)."""
        rows = []
        for a, nu_value in enumerate(grid.nu_axis):
            for b, c_value in enumerate(grid.c_axis):
                if grid.scale == "log":
                    nu, c, log_nu, log_c = np.exp(nu_value), np.exp(c_value), nu_value, c_value
                else:
                    nu, c, log_nu, log_c = nu_value, c_value, np.log(nu_value), np.log(c_value)
                rows.append([_num(nu), _num(c), _num(log_nu), _num(log_c), _num(grid.values[a, b])])
        return self._write_rows("heatmap.csv", ["nu", "c", "log_nu", "log_c", "value"], rows)

    def write_comparison(self, rows: List[list], dim: int) -> Path:
        header = ["schedule", "seed", "pass"] + [f"mean_{a}" for a in range(dim)]
        return self._write_rows(
            "comparison.csv",
            header,
            ([label, seed, pass_index] + [_num(v) for v in mean] for label, seed, pass_index, mean in rows),
        )

    def write_calibration(self, rows: List[CalibrationRow]) -> Path:
        return self._write_rows(
            "calibration.csv",
            ["round", "epsilon_used", "epsilon_proposed", "converged"],
            (
                [r.round, _num(r.epsilon_used), _num(r.epsilon_proposed), str(r.converged).lower()]
                for r in rows
            ),
        )
