"""
Shared fixtures.
"""

import numpy as np
import pytest

from src.models.gaussian import MomentParams, NaturalParams, to_natural
from src.services.builtin_models import GaussMeanModel


@pytest.fixture
def std_prior() -> NaturalParams:
    """N(0, 1) prior in natural parameters."""
    return NaturalParams(np.zeros(1), np.eye(1))


@pytest.fixture
def prior_2d() -> NaturalParams:
    return to_natural(MomentParams(np.zeros(2), np.eye(2)))


@pytest.fixture
def gauss_model(std_prior) -> GaussMeanModel:
    """Five observations of a unit-noise Gaussian mean."""
    return GaussMeanModel(np.array([0.3, -0.1, 1.2, 0.8, 0.5]), std_prior, seed=11)


@pytest.fixture
def toml_writer(tmp_path):
    """Write a TOML config into tmp_path and return its path."""

    def write(text: str, name: str = "run.toml"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return write
