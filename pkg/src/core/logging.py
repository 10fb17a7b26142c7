"""
Logging configuration for the EP-ABC engine.
"""

import logging
import sys
import traceback
from typing import Optional, Sequence

from src.core.config import settings


def setup_logging(level: str = "INFO") -> logging.Logger:
    """
    Configure application logging.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger("epabc")
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))

    # Clear existing handlers
    logger.handlers.clear()

    # Progress goes to stderr so stdout stays clean for the CLI result line
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.DEBUG)

    formatter = logging.Formatter(
        fmt="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S"
    )
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger


# Global logger instance
logger = setup_logging(settings.LOG_LEVEL)


def _fmt_vector(values: Sequence[float]) -> str:
    return "[" + ", ".join(f"{v:.5g}" for v in values) + "]"


def log_run_start(model: str, schedule: str, n_sites: int, seed: int) -> None:
    """Log the start of an EP run."""
    logger.info(
        f"RUN_START | model={model} | schedule={schedule} | sites={n_sites} | seed={seed}"
    )


def log_site_update(
    pass_index: int,
    site: int,
    mean: Sequence[float],
    n_accepted: int,
    n_simulated: int
) -> None:
    """Log a successful site update."""
    logger.debug(
        f"SITE_UPDATE | pass={pass_index} | site={site} | mean={_fmt_vector(mean)} "
        f"| accepted={n_accepted}/{n_simulated}"
    )


def log_site_skipped(pass_index: int, site: int, reason: str) -> None:
    """Log a skipped site update."""
    logger.warning(f"SITE_SKIPPED | pass={pass_index} | site={site} | reason={reason}")


def log_pass_summary(
    pass_index: int,
    mean: Sequence[float],
    n_updated: int,
    n_skipped: int,
    elapsed_s: float
) -> None:
    """Log the end of a full pass over the sites."""
    logger.info(
        f"PASS | pass={pass_index} | mean={_fmt_vector(mean)} | updated={n_updated} "
        f"| skipped={n_skipped} | time={elapsed_s:.2f}s"
    )


def log_pool_refresh(ess: Optional[float], pool_size: int, reason: str) -> None:
    """Log a recycling pool (re)generation."""
    ess_text = "n/a" if ess is None else f"{ess:.1f}"
    logger.info(f"POOL_REFRESH | ess={ess_text} | size={pool_size} | reason={reason}")


def log_calibration(round_index: int, epsilon_used: float, epsilon_new: float) -> None:
    """Log one epsilon calibration round."""
    logger.info(
        f"CALIBRATION | round={round_index} | eps_used={epsilon_used:.6g} | eps_new={epsilon_new:.6g}"
    )


def log_error(
    error: Exception,
    context: Optional[str] = None,
    include_traceback: bool = True
) -> None:
    """Log error with optional stack trace."""
    error_msg = f"ERROR | {type(error).__name__}: {str(error)}"
    if context:
        error_msg = f"{error_msg} | context={context}"

    if include_traceback:
        tb = traceback.format_exc()
        logger.error(f"{error_msg}\n{tb}")
    else:
        logger.error(error_msg)
