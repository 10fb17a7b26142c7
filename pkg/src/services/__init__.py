# Services module

from src.services.abc_estimator import AbcConfig, AbcEstimator, calibrate_epsilon
from src.services.ep_engine import EPEngine, converged, run, site_update
from src.services.recycling import RecyclingEstimator

__all__ = [
    "AbcConfig",
    "AbcEstimator",
    "calibrate_epsilon",
    "EPEngine",
    "converged",
    "run",
    "site_update",
    "RecyclingEstimator",
]
