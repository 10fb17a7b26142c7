"""
Tests for Halton points and the QMC Gaussian stream.
"""

import numpy as np
import pytest

from src.models.gaussian import MomentParams
from src.services.qmc import halton_points, qmc_gaussian_stream


def test_base_two_sequence():
    assert halton_points(3, 1)[:, 0] == pytest.approx([0.5, 0.25, 0.75])


def test_fast_forward_skips_leading_points():
    whole = halton_points(10, 3)
    np.testing.assert_allclose(halton_points(4, 3, start=7), whole[6:], atol=1e-15)


def test_two_dimensional_second_point():
    points = halton_points(2, 2)
    assert points[1] == pytest.approx([0.25, 2 / 3])


def test_first_point_maps_to_mean():
    target = MomentParams([0.0], [[1.0]])
    assert qmc_gaussian_stream(1, target)[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_affine_map():
    target = MomentParams([1.0, -1.0], [[4.0, 0.0], [0.0, 9.0]])
    base = qmc_gaussian_stream(8, MomentParams([0.0, 0.0], np.eye(2)), stream_offset=3)
    mapped = qmc_gaussian_stream(8, target, stream_offset=3)
    np.testing.assert_allclose(mapped, target.mu + base * np.array([2.0, 3.0]), atol=1e-12)


def test_deterministic_and_contiguous():
    target = MomentParams([0.5, 0.0, 2.0], np.diag([1.0, 2.0, 0.5]))
    whole = qmc_gaussian_stream(100, target, stream_offset=64)
    again = qmc_gaussian_stream(100, target, stream_offset=64)
    np.testing.assert_array_equal(whole, again)
    first = qmc_gaussian_stream(40, target, stream_offset=64)
    second = qmc_gaussian_stream(60, target, stream_offset=104)
    np.testing.assert_array_equal(np.vstack([first, second]), whole)


def test_points_inside_unit_cube():
    points = halton_points(500, 4, start=65)
    assert np.all(points > 0.0) and np.all(points < 1.0)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        halton_points(0, 1)
    with pytest.raises(ValueError):
        qmc_gaussian_stream(5, MomentParams([0.0], [[1.0]]), stream_offset=-1)
