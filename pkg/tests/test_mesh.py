import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ostvam.mesh import (
    OpenMeshWarning, TriMesh, box, cylinder, mesh_from_field, shape_mesh, uv_sphere, voxelize,
)


def _axis(n, lo, hi):
    step = (hi - lo) / n
    return lo + step * (np.arange(n) + 0.5)


def test_box_is_closed_unit_volume():
    m = box()
    assert m.is_watertight()
    assert m.volume() == pytest.approx(1.0)
    assert m.area() == pytest.approx(6.0)


def test_triangle_soup_merges_to_eight_vertices():
    soup = box().triangles
    m = TriMesh.from_triangles(soup + 1e-8)
    assert len(m.vertices) == 8
    assert m.is_watertight()


def test_open_mesh_is_not_watertight():
    m = box()
    assert not TriMesh(m.vertices, m.faces[:-1]).is_watertight()
    assert not TriMesh.empty().is_watertight()


def test_face_index_validation():
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 3]])


def test_cylinder_volume_and_closure():
    m = cylinder(6.0, 10.0, segments=256)
    assert m.is_watertight()
    # inscribed polygon area
    n = 256
    exact = 0.5 * n * 36.0 * np.sin(2 * np.pi / n) * 10.0
    assert m.volume() == pytest.approx(exact, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_same_as_ignores_ordering(seed):
    rng = np.random.default_rng(seed)
    m = uv_sphere(1.0, 6, 8)
    perm = rng.permutation(len(m.vertices))
    inv = np.argsort(perm)
    faces = inv[m.faces]
    faces = np.roll(faces, rng.integers(3), axis=1)  # cyclic rotation keeps winding
    shuffled = TriMesh(m.vertices[perm], faces[rng.permutation(len(faces))])
    assert m.same_as(shuffled)
    assert not m.same_as(m.flipped())


def test_voxelize_unit_cube():
    x = _axis(8, -1, 1)
    inside = voxelize(box(), x, x, x)
    expect = (np.abs(x) < 0.5)
    assert np.array_equal(inside, expect[:, None, None] & expect[None, :, None] & expect[None, None, :])


def test_voxelize_sphere_volume():
    r = 5.0
    x = _axis(128, -6, 6)
    inside = voxelize(uv_sphere(r, 96, 192), x, x, x)
    vol = inside.sum() * (12 / 128) ** 3
    assert vol == pytest.approx(4 / 3 * np.pi * r**3, rel=0.02)


def test_voxelize_open_mesh_warns_and_fills():
    m = cylinder(3.0, 4.0, segments=64)
    holed = TriMesh(m.vertices, np.delete(m.faces, 2 * 64 + 5, axis=0))  # one bottom cap triangle
    x = _axis(40, -4, 4)
    with pytest.warns(OpenMeshWarning):
        inside = voxelize(holed, x, x, x)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ref = voxelize(m, x, x, x)
    assert np.mean(inside != ref) < 1e-3


def test_mesh_from_field_sphere():
    n, h = 41, 0.25
    c = (np.arange(n) - (n - 1) / 2) * h
    zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
    field = 3.0 - np.sqrt(xx**2 + yy**2 + zz**2)
    m = mesh_from_field(field, (h, h, h), (c[0],) * 3)
    assert m.is_watertight()
    assert np.max(np.abs(np.linalg.norm(m.vertices, axis=1) - 3.0)) < 0.5 * h
    assert m.volume() > 0
    assert mesh_from_field(-np.ones((4, 4, 4)), (1, 1, 1), (0, 0, 0)).is_empty()


def test_field_touching_box_is_capped():
    m = mesh_from_field(np.ones((5, 5, 5)), (1, 1, 1), (0, 0, 0), level=0.5)
    assert m.is_watertight()


@pytest.mark.parametrize("name", ["cylinder", "gyroid", "bunny", "benchy"])
def test_builtin_shapes_are_watertight(name):
    m = shape_mesh(name, resolution=0.2)
    assert m.is_watertight()
    assert m.volume() > 0
    assert 10.0 < m.max_dimension() < 15.0


def test_unknown_shape():
    with pytest.raises(ValueError):
        shape_mesh("teapot")
