"""
Configuration-driven runs: model and estimator assembly, EP execution and
persisted outputs.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from src.core.errors import EPABCError
from src.core.logging import log_calibration, log_error, logger
from src.models.ep_state import EPTrace, Schedule
from src.models.estimates import MomentEstimator
from src.models.gaussian import credible_ellipse, to_moments
from src.models.model_spec import ChunkModel
from src.schemas.config import (
    AR1Config,
    ConfigError,
    GaussMeanConfig,
    MaxStableModelConfig,
    RunConfig,
    load_config,
)
from src.schemas.results import CalibrationRow, ErrorDetail, FinalReport
from src.services.abc_estimator import AbcEstimator, calibrate_epsilon
from src.services.builtin_models import AR1Model, ExactGaussianEstimator, GaussMeanModel
from src.services.ep_engine import AllSitesSkipped, EPEngine
from src.services.maxstable_model import MaxStableModel
from src.services.recycling import RecyclingEstimator
from src.services.spatial_extremes import StationLayout, correlation_distance_grid
from src.storage.results_repo import ResultsRepository


@dataclass
class RunOutcome:
    """Trace of a run plus the error that ended it, if any."""

    trace: Optional[EPTrace]
    error: Optional[ErrorDetail] = None


def build_model(cfg: RunConfig) -> ChunkModel:
    """Instantiate the configured model from files or its synthetic section."""
    spec = cfg.model
    if spec is None:
        raise ConfigError("model: section is required for this command", ["model"])
    prior = cfg.prior()

    if isinstance(spec, GaussMeanConfig):
        if spec.data_file is not None:
            return GaussMeanModel.from_file(spec.data_file, prior, spec.noise_sd, cfg.seed)
        if len(spec.synthetic.theta) != prior.dim:
            raise ConfigError("model.synthetic.theta: length differs from prior_mean", ["model.synthetic.theta"])
        return GaussMeanModel.synthetic(
            np.array(spec.synthetic.theta),
            spec.synthetic.n,
            prior,
            spec.noise_sd,
            data_seed=spec.synthetic.seed,
            seed=cfg.seed,
        )

    if isinstance(spec, AR1Config):
        if spec.data_file is not None:
            return AR1Model.from_file(spec.data_file, prior, cfg.seed)
        return AR1Model.synthetic(
            np.array(spec.synthetic.theta), spec.synthetic.n, prior, spec.synthetic.seed, cfg.seed
        )

    if isinstance(spec, MaxStableModelConfig):
        ms_cfg = spec.max_stable_config()
        if spec.data_file is not None:
            if spec.stations_file is None:
                raise ConfigError("model.stations_file: required with data_file", ["model.stations_file"])
            return MaxStableModel.from_files(spec.stations_file, spec.data_file, prior, ms_cfg, cfg.seed)
        if spec.stations_file is not None:
            layout = StationLayout.from_file(spec.stations_file)
        else:
            layout = StationLayout.synthetic(spec.synthetic.n_stations, spec.synthetic.side, spec.synthetic.layout_seed)
        return MaxStableModel.synthetic(
            layout,
            np.array(spec.synthetic.theta),
            spec.synthetic.n,
            prior,
            ms_cfg,
            data_seed=spec.synthetic.seed,
            seed=cfg.seed,
        )

    raise ConfigError(f"model.name: unknown model '{spec.name}'", ["model.name"])


def build_estimator(
    cfg: RunConfig,
    model: ChunkModel,
    seed: int,
    epsilon: Optional[float] = None,
) -> MomentEstimator:
    if cfg.estimator == "exact":
        return ExactGaussianEstimator(model)
    abc = cfg.abc_config(epsilon)
    if cfg.use_recycling:
        return RecyclingEstimator(model, abc, seed, pool_size=cfg.pool_size, ess_threshold=cfg.ess_threshold)
    return AbcEstimator(model, abc, seed)


def execute(
    cfg: RunConfig,
    model: ChunkModel,
    schedule: Optional[Schedule] = None,
    seed: Optional[int] = None,
    epsilon: Optional[float] = None,
) -> RunOutcome:
    """
    Run EP on an already built model; engine errors are returned, not raised.
    """
    seed = cfg.seed if seed is None else seed
    try:
        estimator = build_estimator(cfg, model, seed, epsilon)
        engine = EPEngine(model, estimator, schedule or cfg.schedule, cfg.update_policy(), seed)
        return RunOutcome(trace=engine.run())
    except AllSitesSkipped as e:
        log_error(e, context="run", include_traceback=False)
        return RunOutcome(trace=e.trace, error=ErrorDetail(code=e.code, message=str(e)))
    except EPABCError as e:
        log_error(e, context="run", include_traceback=False)
        return RunOutcome(trace=None, error=ErrorDetail(code=e.code, message=str(e)))


def build_report(cfg: RunConfig, model: ChunkModel, outcome: RunOutcome) -> FinalReport:
    report = FinalReport(
        schedule=cfg.schedule.label,
        seed=cfg.seed,
        model=model.describe(),
        config=cfg.model_dump(mode="json"),
        error=outcome.error,
    )
    trace = outcome.trace
    if trace is None or trace.state is None:
        return report

    report.converged = trace.converged
    report.passes_run = trace.passes_run
    report.total_simulated = trace.total_simulated
    report.skipped_updates = sum(1 for rec in trace.records if rec.skipped)
    report.pool_refreshes = trace.pool_refreshes
    g = trace.state.global_
    report.r = g.r.tolist()
    report.Q = g.Q.tolist()
    try:
        moments = to_moments(g)
        report.mean = moments.mu.tolist()
        report.cov = moments.Sigma.tolist()
    except EPABCError as e:
        logger.warning(f"FINAL_MOMENTS_UNAVAILABLE | {e}")
    return report


def run_from_config(path: Path) -> RunOutcome:
    """
    Load a config, run EP and write trace.csv, timing.csv, acceptance.csv,
    final.json and (for two-dimensional theta) ellipse.csv.

    Raises:
        ConfigError: If the configuration is invalid
    """
    cfg = load_config(path)
    model = build_model(cfg)
    outcome = execute(cfg, model)
    repo = ResultsRepository(cfg.output_dir)

    if outcome.trace is not None:
        repo.write_trace(outcome.trace, model.theta_dim)
        repo.write_timing(outcome.trace)
        repo.write_acceptance(outcome.trace)
    report = build_report(cfg, model, outcome)
    repo.write_final(report)
    if report.mean is not None and model.theta_dim == 2:
        repo.write_ellipse(credible_ellipse(to_moments(outcome.trace.state.global_), cfg.ellipse_level))
    return outcome


def emit_heatmap(path: Path) -> Path:
    """Write heatmap.csv for the config's [heatmap] section."""
    cfg = load_config(path)
    if cfg.heatmap is None:
        raise ConfigError("heatmap: section is required for the heatmap command", ["heatmap"])
    hm = cfg.heatmap
    nu_values, c_values = hm.axes()
    grid = correlation_distance_grid(
        nu_values, c_values, reference=hm.reference, h_max=hm.h_max, n_quad=hm.n_quad, scale=hm.scale
    )
    return ResultsRepository(cfg.output_dir).write_heatmap(grid)


def compare_schedules(path: Path, schedules: Optional[Sequence[Schedule]] = None) -> Path:
    """
    Run the configured model under each schedule (and each seed) and write
    the per-pass posterior-mean trajectories to comparison.csv.
    """
    cfg = load_config(path)
    if schedules is None:
        if cfg.compare is None:
            raise ConfigError("compare: section is required for the compare command", ["compare"])
        schedules = cfg.compare.schedules
    if not schedules:
        raise ConfigError("compare.schedules: at least one schedule is required", ["compare.schedules"])
    seeds = cfg.compare.seeds if cfg.compare is not None and cfg.compare.seeds else [cfg.seed]

    model = build_model(cfg)
    rows: List[list] = []
    for schedule in schedules:
        for seed in seeds:
            outcome = execute(cfg, model, schedule=schedule, seed=seed)
            if outcome.trace is None:
                raise EPABCError(f"{schedule.label} seed {seed}: {outcome.error.message}")
            for pass_index, mean in enumerate(outcome.trace.pass_means(), start=1):
                rows.append([schedule.label, seed, pass_index, mean])
    return ResultsRepository(cfg.output_dir).write_comparison(rows, model.theta_dim)


def calibrate(path: Path) -> Path:
    """
    Alternate EP runs and epsilon calibration for the configured number of
    rounds, writing calibration.csv.
    """
    cfg = load_config(path)
    calib = cfg.calibration
    if calib is None:
        raise ConfigError("calibration: section is required for the calibrate command", ["calibration"])
    if cfg.estimator == "exact":
        raise ConfigError("estimator: calibration needs the abc estimator", ["estimator"])

    model = build_model(cfg)
    epsilon = cfg.epsilon
    rows: List[CalibrationRow] = []
    for round_index in range(1, calib.rounds + 1):
        outcome = execute(cfg, model, epsilon=epsilon)
        if outcome.trace is None or not outcome.trace.acceptance:
            message = outcome.error.message if outcome.error else "no acceptance records"
            raise EPABCError(f"calibration round {round_index}: {message}")
        proposed = calibrate_epsilon(outcome.trace.acceptance.values(), calib.floor)
        log_calibration(round_index, epsilon, proposed)
        rows.append(
            CalibrationRow(
                round=round_index,
                epsilon_used=epsilon,
                epsilon_proposed=proposed,
                converged=outcome.trace.converged,
            )
        )
        epsilon = proposed
    return ResultsRepository(cfg.output_dir).write_calibration(rows)
