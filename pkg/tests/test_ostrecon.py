import numpy as np
import pytest
from dataclasses import replace
from scipy.ndimage import binary_dilation, binary_erosion, map_coordinates

from conftest import default_session
from ostvam.grids import GridSpec, ImageStack, VoxelGrid
from ostvam.metrology import inside_field
from ostvam.ostrecon import (
    OstVolume, default_recon_grid, extract_isosurface, overhead_projection, reconstruct_rotations,
    reconstruct_volume, threshold_volume,
)
from ostvam.printsim import render_frames, vertical_magnification_camera
from ostvam.remap import OpticalConfig, vertical_magnifications
from ostvam.tomo import fbp, radon

BPAGDA = OpticalConfig.preset("bpagda")
ANGLES = np.arange(180) * 2.0


def _cylinder_scatter(radius=3.0, rows=slice(2, 8), nz=10, n=128, h=0.155, value=1.0):
    g = VoxelGrid.centered((n, n, nz), (h, h, h))
    x = g.axis_coords("x")
    r = np.hypot(*np.meshgrid(x, x))
    v = np.zeros(g.values.shape)
    v[rows] = value * (r <= radius)
    return g.with_values(v)


@pytest.fixture(scope="module")
def cylinder_frames():
    return render_frames(_cylinder_scatter(), BPAGDA, ANGLES)


@pytest.fixture(scope="module")
def cylinder_recon(cylinder_frames):
    return reconstruct_volume(cylinder_frames, BPAGDA)


def test_zero_frames_give_zero_volume():
    fr = ImageStack(np.zeros((180, 6, 107), np.float32), ANGLES, BPAGDA.camera_pixel_mm, 0.155)
    vol = reconstruct_volume(fr, BPAGDA)
    assert not vol.grid.values.any()


def test_grid_matches_camera_binning(cylinder_recon):
    g = cylinder_recon.grid
    assert cylinder_recon.voxel_size_mm == pytest.approx(BPAGDA.camera_pixel_mm / BPAGDA.n_resin_red)
    assert g.nx == g.ny == 2 * int(np.ceil(BPAGDA.imaging_radius_mm / BPAGDA.virtual_camera_pixel_mm))
    assert np.all(np.isfinite(g.values))
    x = g.axis_coords("x")
    r = np.hypot(*np.meshgrid(x, x))
    assert not g.values[:, r > BPAGDA.imaging_radius_mm].any()


def test_cylinder_radius_within_one_voxel(cylinder_recon):
    g = cylinder_recon.grid
    sl = g.values[g.nz // 2]
    h = g.spacing_mm[0]
    radius = np.sqrt((sl > 0.5).sum() * h * h / np.pi)
    assert abs(radius - 3.0) < h
    x = g.axis_coords("x")
    r = np.hypot(*np.meshgrid(x, x))
    assert sl[r < 2.0].mean() == pytest.approx(1.0, rel=0.05)


def test_reconstruction_is_linear(cylinder_frames, cylinder_recon):
    other = render_frames(_cylinder_scatter(radius=1.5, value=2.0), BPAGDA, ANGLES)
    both = replace(cylinder_frames, frames=3.0 * cylinder_frames.frames + other.frames)
    lhs = reconstruct_volume(both, BPAGDA).grid.values
    rhs = 3.0 * cylinder_recon.grid.values + reconstruct_volume(other, BPAGDA).grid.values
    np.testing.assert_allclose(lhs, rhs, atol=1e-4 * np.abs(rhs).max())


def test_vertical_demagnification_inverts_render_stretch():
    m_vi = vertical_magnifications(BPAGDA)[1]
    assert m_vi == pytest.approx(vertical_magnification_camera(BPAGDA), rel=2e-3)
    g = VoxelGrid.centered((128, 128, 61), (0.155,) * 3)
    x = g.axis_coords("x")
    r = np.hypot(*np.meshgrid(x, x))
    v = np.zeros(g.values.shape)
    v[10] = v[50] = r <= 3.0
    fr = render_frames(g.with_values(v), BPAGDA, ANGLES)
    vol = reconstruct_volume(fr, BPAGDA).grid
    c = vol.nx // 2
    prof, zz = vol.values[:, c, c], vol.axis_coords("z")
    lo, hi = ((prof[s] * zz[s]).sum() / prof[s].sum() for s in (zz < 0, zz > 0))
    z = g.axis_coords("z")
    assert (hi - lo) == pytest.approx(z[50] - z[10], rel=2e-3)


def test_rejects_short_coverage_and_foreign_config(cylinder_frames):
    half = replace(cylinder_frames, frames=cylinder_frames.frames[:90], angles_deg=ANGLES[:90])
    with pytest.raises(ValueError, match="360"):
        reconstruct_volume(half, BPAGDA)
    with pytest.raises(ValueError, match="configuration"):
        reconstruct_volume(cylinder_frames, OpticalConfig.preset("dudma"))


def test_per_rotation_reconstruction(cylinder_frames):
    fr = cylinder_frames
    two = ImageStack(np.concatenate([0.5 * fr.frames, fr.frames]), np.concatenate([ANGLES, ANGLES + 360.0]),
                     fr.pixel_mm, fr.row_pitch_mm, meta=fr.meta)
    vols = reconstruct_rotations(two, BPAGDA)
    assert [v.rotation for v in vols] == [0, 1]
    np.testing.assert_allclose(vols[1].grid.values, 2 * vols[0].grid.values, atol=1e-9)


def test_threshold_edge_cases(cylinder_recon):
    vol = OstVolume(cylinder_recon.grid.with_values(np.abs(cylinder_recon.grid.values) + 1e-3))
    assert not threshold_volume(vol, vol.grid.values.max() + 1).values.any()
    assert threshold_volume(vol, 0.0).values.all()
    assert vol.ip_threshold == 0.0
    with pytest.raises(ValueError):
        threshold_volume(vol, np.nan)


def _sphere_volume(radius=3.0, n=48, h=0.2):
    g = VoxelGrid.centered((n, n, n), (h, h, h))
    z, y, x = np.meshgrid(*(g.axis_coords(a) for a in "zyx"), indexing="ij")
    return OstVolume(g.with_values(radius - np.sqrt(x * x + y * y + z * z)))


def test_isosurface_of_sphere():
    vol = _sphere_volume()
    m = extract_isosurface(vol, 0.0)
    rad = np.linalg.norm(m.vertices, axis=1)
    assert np.abs(rad - 3.0).max() < 0.5 * 0.2
    assert m.is_watertight()
    assert extract_isosurface(vol, 100.0).is_empty()


def test_isosurfaces_nest():
    vol = _sphere_volume()
    inner = extract_isosurface(vol, 1.0)
    outer = extract_isosurface(vol, 0.0)
    assert np.all(inside_field(outer, inner.vertices, 0.1))


def test_overhead_projection():
    g = VoxelGrid.centered((40, 40, 12), (0.2, 0.2, 0.2))
    assert not overhead_projection(OstVolume(g)).any()
    x = g.axis_coords("x")
    disk = np.hypot(*np.meshgrid(x, x)) <= 2.0
    v = np.zeros(g.values.shape)
    v[3:10] = disk
    vol = OstVolume(g.with_values(v))
    img = overhead_projection(vol)
    assert np.array_equal(img, 7.0 * disk)
    assert np.array_equal(overhead_projection(vol, "thresholded_sum", ip=0.5), img)
    assert overhead_projection(vol, plane="xz").shape == (12, 40)
    with pytest.raises(ValueError):
        overhead_projection(vol, "thresholded_sum")
    with pytest.raises(ValueError):
        overhead_projection(vol, plane="zz")


def _slice_errors(session, cfg):
    """Per-slice relative L2 of the camera pipeline and of ideal FBP on the same truth slices."""
    vol = reconstruct_volume(session.frames.last_turn(), cfg).grid
    truth = session.scatter()
    off = (truth.nx - vol.nx) // 2
    tr = np.asarray(truth.values)[:, off:off + vol.ny, off:off + vol.nx]
    zi = (truth.axis_coords("z") - vol.origin_mm[2]) / vol.spacing_mm[2]
    iy, ix = np.indices((vol.ny, vol.nx)).reshape(2, -1)
    spec = GridSpec.square(vol.nx, vol.spacing_mm[0])
    disk = spec.radius() <= cfg.imaging_radius_mm
    out = []
    for k in np.flatnonzero(tr.any(axis=(1, 2))):
        rec = map_coordinates(vol.values, [np.full(ix.size, zi[k]), iy, ix], order=1).reshape(vol.ny, vol.nx)
        ideal = np.where(disk, fbp(radon(tr[k], spec.spacing_mm, np.arange(180) * 2.0, 160, spec.spacing_mm), spec), 0)
        part = tr[k] > 0.5
        edge = binary_dilation(part, iterations=2) & ~binary_erosion(part, iterations=2)
        norm = np.linalg.norm(tr[k])
        out.append((np.linalg.norm(rec - tr[k]) / norm, np.linalg.norm(ideal - tr[k]) / norm,
                    np.linalg.norm((rec - tr[k])[~edge]) / norm))
    return np.array(out)


@pytest.fixture(scope="module")
def slice_errors(default_cylinder_session):
    return _slice_errors(default_cylinder_session, BPAGDA)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the sharp gel edge alone costs about 7% L2 even for ideal FBP on a 0.155 mm grid")
def test_round_trip_slice_error_below_five_percent(slice_errors):
    assert slice_errors[:, 0].max() < 0.05


@pytest.mark.slow
def test_round_trip_slice_error_tracks_ideal_fbp(slice_errors):
    mid = slice_errors[len(slice_errors) // 4: 3 * len(slice_errors) // 4]
    assert np.all(mid[:, 0] < 1.5 * mid[:, 1])
    assert np.all(mid[:, 2] < 0.05)  # away from the gel edge


def _first_rotation(gel_stack, region):
    return next((k for k, g in enumerate(gel_stack) if (np.asarray(g.values, bool) & region).any()), None)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="in the dose model the thin cabin walls gel about one rotation before the hull")
def test_coarse_features_appear_before_fine():
    s = default_session("benchy")
    design = np.asarray(s.design.values, bool)
    z = s.design.axis_coords("z")[:, None, None]
    hull = design & (z < -0.5)
    walls = design & (z > 0.5) & (z < 2.5)
    # overhead thresholded sums of the truth gel, one per rotation
    tops = [overhead_projection(OstVolume(g), "thresholded_sum", ip=0.5) for g in s.truth_gel]
    assert any(t.any() for t in tops)
    assert _first_rotation(s.truth_gel, hull) < _first_rotation(s.truth_gel, walls)
