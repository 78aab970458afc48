"""Optical scattering tomography: camera frames to a scattering-density volume.

Each image row is resampled onto a parallel-beam sinogram, filtered and
back-projected; rows are then placed at their true heights by dividing the
image-space row position by the vertical imaging magnification.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grids import GridSpec, ImageStack, VoxelGrid
from .mesh import TriMesh, mesh_from_field
from .remap import (
    OpticalConfig,
    apply_stencil,
    camera_resampling_plan,
    pad_detectors,
    periodic_stencil,
    vertical_magnifications,
)
from .tomo import backproject, ramp_filter
from .grids import Sinogram


@dataclass
class OstVolume:
    grid: VoxelGrid
    ip_threshold: float | None = None
    rotation: int | None = None

    @property
    def voxel_size_mm(self) -> float:
        return self.grid.spacing_mm[0]


def default_recon_grid(cfg: OpticalConfig, pitch_mm: float | None = None) -> GridSpec:
    pitch = cfg.virtual_camera_pixel_mm if pitch_mm is None else pitch_mm
    half = int(np.ceil(cfg.imaging_radius_mm / pitch))
    return GridSpec.square(2 * half, pitch)


def reconstruct_volume(frames: ImageStack, cfg: OpticalConfig, grid: GridSpec | None = None,
                       rotation: int | None = None) -> OstVolume:
    """Filtered back-projection of the last full turn of ``frames``.

    The slice grid defaults to the virtual camera pixel and just covers the
    imaging disk of radius ``R n1 / n2``; voxels outside that disk are zero.
    """
    if "config_hash" in frames.meta and frames.meta["config_hash"] != cfg.config_hash():
        raise ValueError("frames were produced with a different optical configuration")
    g = default_recon_grid(cfg) if grid is None else grid
    full, s, phi, stage, x_c = camera_resampling_plan(frames, cfg)
    stencil = periodic_stencil(full.n_frames, full.angles_deg[0], full.col_coords(), stage, x_c[None, :])
    # (angles, columns, rows) so every row rides along one stencil
    table = pad_detectors(np.asarray(full.frames, dtype=float).transpose(0, 2, 1))
    virt = apply_stencil(table, stencil)
    virt = np.where(np.isfinite(x_c)[None, :, None], virt, 0.0)
    pitch = s[1] - s[0]
    center = -s[0] / pitch
    inside = g.radius() <= cfg.imaging_radius_mm
    vol = np.zeros((full.n_rows, g.ny, g.nx))
    for k in range(full.n_rows):
        row = virt[:, :, k]
        if not row.any():
            continue
        sino = Sinogram(row, phi, pitch, center, "virtual")
        vol[k] = np.where(inside, backproject(ramp_filter(sino), g), 0.0)
    m_vi = vertical_magnifications(cfg)[1]
    z = full.row_coords() / m_vi
    h = g.spacing_mm
    origin = (-(g.nx - 1) / 2 * h, -(g.ny - 1) / 2 * h, z[0])
    spacing = (h, h, full.row_pitch_mm / m_vi)
    return OstVolume(VoxelGrid(vol, spacing, origin), None, rotation)


def reconstruct_rotations(frames: ImageStack, cfg: OpticalConfig, grid: GridSpec | None = None) -> list[OstVolume]:
    """One volume per completed rotation, each from that rotation's last 360 degrees of frames."""
    a = frames.angles_deg
    step = float(np.median(np.diff(a)))
    n_rot = int(np.floor((a[-1] - a[0] + step) / 360.0 + 1e-9))
    out = []
    for k in range(n_rot):
        end = a[0] + 360.0 * (k + 1)
        keep = a < end - 0.5 * step
        sub = replace(frames, frames=frames.frames[keep], angles_deg=a[keep])
        out.append(reconstruct_volume(sub, cfg, grid, rotation=k))
    return out


def threshold_volume(vol: OstVolume, ip: float) -> VoxelGrid:
    """Binary mask of voxels above ``ip``; ``ip`` is recorded on the volume."""
    if not np.isfinite(ip):
        raise ValueError("threshold must be finite")
    vol.ip_threshold = float(ip)
    return vol.grid.with_values(np.asarray(vol.grid.values) > ip)


def extract_isosurface(vol: OstVolume, ip: float) -> TriMesh:
    """Closed level-set surface at ``ip`` (empty mesh if nothing exceeds it)."""
    g = vol.grid
    return mesh_from_field(np.asarray(g.values, dtype=float), g.spacing_mm, g.origin_mm, level=ip)


PROJECTION_AXES = {"xy": 0, "xz": 1, "yz": 2}


def overhead_projection(vol: OstVolume, mode: str = "sum", ip: float | None = None, plane: str = "xy") -> np.ndarray:
    """Sum along the axis normal to ``plane``; ``thresholded_sum`` sums the mask at ``ip``."""
    if plane not in PROJECTION_AXES:
        raise ValueError(f"plane must be one of {sorted(PROJECTION_AXES)}")
    if mode == "sum":
        data = np.asarray(vol.grid.values, dtype=float)
    elif mode == "thresholded_sum":
        if ip is None:
            raise ValueError("thresholded_sum needs an ip threshold")
        data = threshold_volume(vol, ip).values.astype(float)
    else:
        raise ValueError("mode must be 'sum' or 'thresholded_sum'")
    return data.sum(axis=PROJECTION_AXES[plane])
