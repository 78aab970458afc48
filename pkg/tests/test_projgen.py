import numpy as np
import pytest
from scipy.ndimage import gaussian_filter1d

from ostvam import projgen
from ostvam.grids import GridSpec, VoxelGrid
from ostvam.mesh import box, cylinder, uv_sphere
from ostvam.projgen import (
    PatternOptions, StageError, TargetStack, build_target, compute_patterns, default_detectors,
    disk_absorption_map, filtered_nonneg_sinogram, normalize_iteration, separation, slice_grid_for, slice_mesh,
)
from ostvam.remap import OpticalConfig, projector_columns
from ostvam.tomo import radon, ramp_filter

BPAGDA = OpticalConfig.preset("bpagda")
ANGLES = np.arange(0, 360, 2.0)


def _grid(n=32, nz=4, h=0.155):
    return VoxelGrid.centered((n, n, nz), (h, h, h))


def test_slice_mesh_cube_interior():
    g = VoxelGrid.centered((8, 8, 8), (0.25,) * 3)
    out = slice_mesh(box((1.0, 1.0, 1.0)), g)
    core = np.zeros((8, 8, 8), bool)
    core[2:6, 2:6, 2:6] = True
    assert np.array_equal(out.values.astype(bool), core)


def test_slice_mesh_vertical_prestretch():
    g = VoxelGrid.centered((8, 8, 200), (0.5, 0.5, 0.01))
    slab = box((2.0, 2.0, 0.963))
    rows = slice_mesh(slab, g, vertical_stretch=0.963).values[:, 4, 4].sum()
    assert rows == 100  # height h / 0.963 = 1 mm of 0.01 mm rows
    with pytest.raises(ValueError):
        slice_mesh(slab, g, vertical_stretch=0.0)


def test_slice_mesh_sphere_volume():
    g = VoxelGrid.centered((128, 128, 128), (0.1,) * 3)
    vol = slice_mesh(uv_sphere(5.0, 96, 192), g).values.sum() * 1e-3
    assert vol == pytest.approx(4 / 3 * np.pi * 125, rel=0.02)


def test_build_target():
    g = _grid()
    t = build_target(g.with_values(np.zeros(g.values.shape)), 0.5)
    assert np.all(t.grid.values == 0.5)
    cb = (np.indices(g.values.shape).sum(0) % 2).astype(float)
    t = build_target(g.with_values(cb), 0.3)
    assert np.array_equal(t.grid.values, np.where(cb > 0, 1.0, 0.3).astype(np.float32))
    assert np.array_equal(t.part, cb > 0)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            build_target(g.with_values(cb), bad)
    with pytest.raises(ValueError):
        build_target(g.with_values(cb * 0.5), 0.5)


def test_clip_semantics():
    rng = np.random.default_rng(0)
    img = rng.random((32, 32)) - 0.3
    raw = ramp_filter(radon(img, 0.155, ANGLES, *default_detectors(GridSpec.square(32, 0.155))))
    assert raw.values.min() < -0.2
    s = filtered_nonneg_sinogram(img, 0.5, ANGLES, 0.155)
    assert np.array_equal(s.values, np.maximum(raw.values, 0.5))
    z = filtered_nonneg_sinogram(img, 0.5, ANGLES, 0.155, clip="zero")
    assert np.array_equal(z.values, np.maximum(raw.values, 0.0))
    with pytest.raises(ValueError):
        filtered_nonneg_sinogram(img, 0.5, ANGLES, 0.155, clip="none")


def test_all_zero_slice_gives_uniform_background():
    s = filtered_nonneg_sinogram(np.zeros((16, 16)), 0.5, ANGLES, 0.155)
    assert np.all(s.values == 0.5)


def _disk_target(n=48, radius=2.5, h=0.155, B=0.5):
    g = VoxelGrid.centered((n, n, 2), (h, h, h))
    r = g.slice_grid().radius()
    part = np.zeros((2, n, n), bool)
    part[0] = r <= radius
    return build_target(g.with_values(part.astype(float)), B)


def test_normalize_zero_iterations_is_identity():
    t = _disk_target()
    assert normalize_iteration(t, 0) is t
    with pytest.raises(ValueError):
        normalize_iteration(t, -1)


def test_normalize_proportional_dose(monkeypatch):
    monkeypatch.setattr(projgen, "simulated_dose", lambda img, *a, **k: 2.0 * np.asarray(img))
    t = _disk_target()
    out = normalize_iteration(t, 3, ANGLES)
    np.testing.assert_allclose(out.grid.values[0], t.grid.values[0] / 2.0, rtol=1e-6)
    np.testing.assert_array_equal(out.grid.values[1], t.grid.values[1])  # slice without part untouched
    assert out.iteration_count == 3 and out.flagged_voxels == 0


def test_normalize_flags_dose_nulls(monkeypatch):
    monkeypatch.setattr(projgen, "simulated_dose", lambda img, *a, **k: np.zeros_like(img))
    t = _disk_target()
    out = normalize_iteration(t, 1, ANGLES)
    assert out.flagged_voxels == t.grid.values[0].size
    assert np.all(np.isfinite(out.grid.values))


def test_normalize_improves_disk_histogram_gap():
    t = _disk_target(B=0.5)
    part = t.part[0]
    before = projgen.simulated_dose(t.grid.values[0], 0.5, ANGLES, 0.155, clip="zero")
    after_t = normalize_iteration(t, 1, ANGLES, clip="zero").grid.values[0]
    after = projgen.simulated_dose(after_t, 0.5, ANGLES, 0.155, clip="zero")
    gap = lambda d: np.percentile(d[part], 5) - np.percentile(d[~part], 95)
    assert gap(after) > gap(before)


def test_separation_metric():
    part = np.array([[1, 1, 0, 0]], bool)
    dose = np.array([[0.9, 1.0, 0.2, 0.4]])
    assert separation(dose, part) == pytest.approx(0.5)
    assert separation(dose, part, region=np.array([[1, 1, 1, 0]], bool)) == pytest.approx(0.7)


def test_absorption_map_properties():
    g = GridSpec.square(128, 0.155)
    r = g.radius()
    inner = r <= BPAGDA.addressable_radius_mm - 0.5
    flat = disk_absorption_map(BPAGDA, g, mu_a=0.0)
    assert flat[inner].std() / flat[inner].mean() < 0.02
    assert np.all(flat[r > BPAGDA.addressable_radius_mm] == 0)

    def centre_edge(mu):
        d = disk_absorption_map(BPAGDA, g, ANGLES, mu_a=mu)
        edge = (r > 7.0) & (r < 7.5)
        return d[r < 0.3].mean() / d[edge].mean()

    c1, c2 = centre_edge(1 / 12.4), centre_edge(2 / 12.4)
    assert c1 < 1.0
    assert c2 < c1
    with pytest.raises(ValueError):
        disk_absorption_map(BPAGDA, g, ANGLES, mu_a=-1.0)


SMALL = PatternOptions(dims=(64, 64, 6), spacing_mm=0.3, angle_step_deg=2.0)  # grid covers the addressable disk


def test_cylinder_patterns_are_axisymmetric_and_nonnegative():
    pats = compute_patterns(cylinder(3.0, 20.0, segments=256), BPAGDA, SMALL)
    f = pats.frames.frames
    assert f.shape == (180, 6, len(projector_columns(BPAGDA)))
    assert np.all(f >= 0)
    assert pats.n_patterns == 180
    # the voxel grid has exact quarter-turn symmetry
    np.testing.assert_allclose(f, np.roll(f, 45, axis=0), atol=1e-6 * f.max())
    # beyond the voxel staircase (which the ramp filter amplifies) rows agree across angles
    smooth = gaussian_filter1d(f.astype(float), 1.0 / BPAGDA.projector_pixel_mm, axis=2)
    assert np.abs(smooth - smooth.mean(axis=0)).max() < 0.1 * smooth.max()
    assert np.array_equal(f[:, 0], f[:, -1])
    assert pats.meta["iterations"] == 1
    assert pats.frames.meta["config_hash"] == BPAGDA.config_hash()


def test_degenerate_pipeline_equals_plain_projections():
    cfg = OpticalConfig(n_resin_blue=1.0, n_resin_red=1.0, throw_ratio=np.inf, camera_distance_mm=np.inf,
                        projector_pixel_mm=0.155, attenuation_mu_a=0.0)
    opts = PatternOptions(dims=(48, 48, 2), background=1e-9, iterations=0, absorption=False, angle_step_deg=2.0)
    mesh = box((3.0, 2.0, 10.0), center=(0.5, 0.3, 0.0))
    pats = compute_patterns(mesh, cfg, opts)
    grid = slice_grid_for(opts)
    binary = slice_mesh(mesh, grid).values[0]
    gs = grid.slice_grid()
    n_det, pitch = default_detectors(gs)
    plain = np.maximum(ramp_filter(radon(binary, 0.155, ANGLES, n_det, pitch)).values, 0.0)
    det = (np.arange(n_det) - (n_det - 1) / 2) * pitch
    cols = projector_columns(cfg)
    expect = np.array([np.interp(cols, det, row, left=0.0, right=0.0) for row in plain])
    np.testing.assert_allclose(pats.frames.frames[:, 0, :], expect, atol=1e-6)


def test_part_outside_addressable_disk_is_stage_error():
    opts = PatternOptions(dims=(128, 128, 4))
    with pytest.raises(StageError) as err:
        compute_patterns(box((2, 2, 10), center=(8.5, 0, 0)), BPAGDA, opts)
    assert err.value.stage == "target"


def test_pattern_stack_rejects_negative():
    from ostvam.grids import ImageStack
    with pytest.raises(ValueError):
        projgen.PatternStack(ImageStack(-np.ones((2, 1, 3)), [0, 1], 0.1, 0.1), 1.0, 1.0)
