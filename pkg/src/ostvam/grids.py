"""Array containers shared by every stage of the pipeline.

Volumes are stored z-major (``values[z, y, x]``) so that a C-order dump is
x-fastest, which is also the on-disk volume layout.  In-plane tomography
assumes the rotation axis passes through the centre of the x/y grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

SPACES = ("physical", "virtual")


def centered_coords(n: int, spacing: float, center_index: float | None = None) -> np.ndarray:
    """Coordinates (mm) of ``n`` samples with the given pitch, zero at ``center_index``."""
    if center_index is None:
        center_index = (n - 1) / 2.0
    return (np.arange(n, dtype=float) - center_index) * spacing


@dataclass
class Sinogram:
    """Per-slice projection data, rows indexed by angle.

    ``space`` is ``"virtual"`` for parallel-beam Radon data and ``"physical"``
    for data sampled on the refracting projector or camera.
    """

    values: np.ndarray
    angles_deg: np.ndarray
    det_pitch_mm: float
    det_center_index: float | None = None
    space: str = "virtual"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.angles_deg = np.asarray(self.angles_deg, dtype=float).ravel()
        if self.values.ndim != 2:
            raise ValueError("sinogram values must be 2D (angles x detectors)")
        n_angles, n_det = self.values.shape
        if n_angles < 1 or n_det < 2:
            raise ValueError(f"sinogram needs >=1 angle and >=2 detectors, got {self.values.shape}")
        if self.angles_deg.size != n_angles:
            raise ValueError("angle list length does not match sinogram rows")
        if n_angles > 1 and np.any(np.diff(self.angles_deg) <= 0):
            raise ValueError("sinogram angles must be strictly increasing")
        if not self.det_pitch_mm > 0:
            raise ValueError("det_pitch_mm must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram contains non-finite values")
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {SPACES}")
        if self.det_center_index is None:
            self.det_center_index = (n_det - 1) / 2.0

    @property
    def n_angles(self) -> int:
        return self.values.shape[0]

    @property
    def n_detectors(self) -> int:
        return self.values.shape[1]

    @property
    def angles_rad(self) -> np.ndarray:
        return np.deg2rad(self.angles_deg)

    def detector_coords(self) -> np.ndarray:
        return centered_coords(self.n_detectors, self.det_pitch_mm, self.det_center_index)

    def with_values(self, values: np.ndarray, **changes) -> "Sinogram":
        return replace(self, values=values, **changes)


@dataclass
class GridSpec:
    """Centred in-plane grid: ``nx`` by ``ny`` pixels of side ``spacing_mm``."""

    nx: int
    ny: int
    spacing_mm: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid dimensions must be positive")
        if not self.spacing_mm > 0:
            raise ValueError("grid spacing must be positive")

    @classmethod
    def square(cls, n: int, spacing_mm: float) -> "GridSpec":
        return cls(n, n, spacing_mm)

    def x(self) -> np.ndarray:
        return centered_coords(self.nx, self.spacing_mm)

    def y(self) -> np.ndarray:
        return centered_coords(self.ny, self.spacing_mm)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) coordinate arrays of shape (ny, nx)."""
        return np.meshgrid(self.x(), self.y())

    def radius(self) -> np.ndarray:
        xx, yy = self.mesh()
        return np.hypot(xx, yy)


@dataclass
class VoxelGrid:
    """Scalar field on a regular grid; ``values`` has shape (nz, ny, nx)."""

    values: np.ndarray
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError("VoxelGrid values must be 3D (nz, ny, nx)")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        if len(self.spacing_mm) != 3 or len(self.origin_mm) != 3:
            raise ValueError("spacing and origin need three components")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError("voxel spacing must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("VoxelGrid contains non-finite values")

    @classmethod
    def centered(cls, dims: Sequence[int], spacing_mm: Sequence[float], values=None, dtype=float):
        """Grid of ``dims = (nx, ny, nz)`` centred on the vial axis and mid-height."""
        nx, ny, nz = (int(d) for d in dims)
        spacing = tuple(float(s) for s in spacing_mm)
        origin = tuple(-(n - 1) / 2.0 * s for n, s in zip((nx, ny, nz), spacing))
        if values is None:
            values = np.zeros((nz, ny, nx), dtype=dtype)
        return cls(values, spacing, origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return nx, ny, nz

    @property
    def nx(self) -> int:
        return self.values.shape[2]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def nz(self) -> int:
        return self.values.shape[0]

    def axis_coords(self, axis: str) -> np.ndarray:
        i = "xyz".index(axis)
        n = self.dims[i]
        return self.origin_mm[i] + np.arange(n) * self.spacing_mm[i]

    def slice_grid(self) -> GridSpec:
        """In-plane grid spec; requires isotropic, axis-centred x/y sampling."""
        sx, sy, _ = self.spacing_mm
        if not np.isclose(sx, sy, rtol=1e-9):
            raise ValueError("slice-wise tomography needs isotropic in-plane spacing")
        for i in (0, 1):
            c = self.origin_mm[i] + (self.dims[i] - 1) / 2.0 * self.spacing_mm[i]
            if abs(c) > 1e-6 * self.spacing_mm[i]:
                raise ValueError("grid must be centred on the rotation axis")
        return GridSpec(self.nx, self.ny, sx)

    def with_values(self, values: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(values, self.spacing_mm, self.origin_mm)

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) xyz points to fractional (x, y, z) voxel indices."""
        points = np.asarray(points, dtype=float)
        return (points - np.asarray(self.origin_mm)) / np.asarray(self.spacing_mm)


@dataclass
class ImageStack:
    """Ordered 2D frames tagged with the vial rotation angle of each frame.

    ``pixel_mm`` is the horizontal object-space pitch, ``row_pitch_mm`` the
    vertical one (image space, before any vertical magnification correction).
    Column ``col_center`` sits on the optical axis; row ``row_center`` on the
    axis height.
    """

    frames: np.ndarray
    angles_deg: np.ndarray
    pixel_mm: float
    row_pitch_mm: float
    col_center: float | None = None
    row_center: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.angles_deg = np.asarray(self.angles_deg, dtype=float).ravel()
        if self.frames.ndim != 3:
            raise ValueError("frames must be (n_frames, n_rows, n_cols)")
        if self.frames.shape[0] != self.angles_deg.size:
            raise ValueError("one angle per frame required")
        if self.angles_deg.size > 1 and np.any(np.diff(self.angles_deg) <= 0):
            raise ValueError("frame angles must be strictly increasing")
        if not (self.pixel_mm > 0 and self.row_pitch_mm > 0):
            raise ValueError("pixel pitches must be positive")
        if self.col_center is None:
            self.col_center = (self.frames.shape[2] - 1) / 2.0
        if self.row_center is None:
            self.row_center = (self.frames.shape[1] - 1) / 2.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_rows(self) -> int:
        return self.frames.shape[1]

    @property
    def n_cols(self) -> int:
        return self.frames.shape[2]

    def col_coords(self) -> np.ndarray:
        return centered_coords(self.n_cols, self.pixel_mm, self.col_center)

    def row_coords(self) -> np.ndarray:
        return centered_coords(self.n_rows, self.row_pitch_mm, self.row_center)

    def angular_span(self) -> float:
        """Covered angle including the last frame's own step."""
        if self.n_frames < 2:
            return 0.0
        step = float(np.median(np.diff(self.angles_deg)))
        return float(self.angles_deg[-1] - self.angles_deg[0] + step)

    def scaled(self, factor: float) -> "ImageStack":
        return replace(self, frames=self.frames * factor)

    def last_turn(self) -> "ImageStack":
        """Frames from the final 360 degrees of the stream."""
        end = self.angles_deg[-1]
        step = float(np.median(np.diff(self.angles_deg))) if self.n_frames > 1 else 360.0
        keep = self.angles_deg > end - 360.0 + 0.5 * step
        return replace(self, frames=self.frames[keep], angles_deg=self.angles_deg[keep])

    @classmethod
    def concatenate(cls, stacks: Sequence["ImageStack"]) -> "ImageStack":
        first = stacks[0]
        return replace(
            first,
            frames=np.concatenate([s.frames for s in stacks]),
            angles_deg=np.concatenate([s.angles_deg for s in stacks]),
        )
