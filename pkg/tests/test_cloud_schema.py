import math

import numpy as np
import pytest
from pydantic import ValidationError

from app.schemas.cloud import PointCloud, ScalarField, Window


def test_window_basic_geometry():
    w = Window(center=(1.0, 2.0), width=4.0, height=2.0)
    assert w.area == 8.0
    assert w.bounds == (-1.0, 1.0, 3.0, 3.0)
    assert w.contains([[3.0, 3.0]]).all()
    assert not w.contains([[3.0, 3.0]], closed=False).any()
    np.testing.assert_allclose(w.distance_to_boundary([[1.0, 2.0], [1.0, 4.0]]), [1.0, 1.0])
    np.testing.assert_allclose(w.distance_to([[1.0, 2.0], [6.0, 7.0]]), [0.0, 5.0])


def test_rotated_window_contains():
    w = Window(width=2.0, height=2.0, angle=math.pi / 4)
    # the corner direction of the axis-aligned square falls outside the rotated one
    assert not w.contains([[0.95, 0.95]]).any()
    assert w.contains([[0.0, 1.3]]).all()


def test_contains_enlargement():
    outer = Window.square(10.0)
    assert outer.contains_enlargement(Window.square(6.0), 2.0)
    assert not outer.contains_enlargement(Window.square(6.0), 2.5)
    rotated = Window(width=6.0, height=6.0, angle=math.pi / 6)
    assert not outer.contains_enlargement(rotated, 1.0)


def test_cloud_rejects_duplicates():
    with pytest.raises(ValidationError):
        PointCloud(points=[[0.0, 0.0], [0.0, 0.0]], window=Window.unit())


def test_cloud_rejects_points_outside_window():
    with pytest.raises(ValidationError):
        PointCloud(points=[[2.0, 0.0]], window=Window.unit())


def test_cloud_rejects_duplicate_ids():
    with pytest.raises(ValidationError):
        PointCloud(points=[[0.1, 0.0], [0.2, 0.0]], ids=[1, 1], window=Window.unit())


def test_cloud_arrays_are_read_only(small_cloud):
    with pytest.raises(ValueError):
        small_cloud.points[0, 0] = 9.0


def test_index_of(small_cloud):
    np.testing.assert_array_equal(small_cloud.index_of([42, 10]), [4, 0])
    with pytest.raises(KeyError):
        small_cloud.index_of([5])


def test_scalar_field_mapping(small_cloud):
    field = ScalarField.from_mapping(small_cloud, {10: 1.0, 3: 2.0, 7: 3.0, 1: 4.0, 42: 5.0})
    assert field.value(42) == 5.0
    assert field.as_mapping()[3] == 2.0
    with pytest.raises(ValueError):
        ScalarField.from_mapping(small_cloud, {10: 1.0})


def test_scalar_field_length_must_match(small_cloud):
    with pytest.raises(ValidationError):
        ScalarField(cloud=small_cloud, values=[1.0, 2.0])
