"""Projection pattern generation: slice, target, filter, normalize, absorb, remap."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .grids import GridSpec, ImageStack, Sinogram, VoxelGrid
from .mesh import TriMesh, voxelize
from .remap import OpticalConfig, projector_columns, resample_projection, vertical_magnifications
from .tomo import attenuated_backproject, backproject, radon, ramp_filter

NORMALIZATION_EPS = 1e-9
CLIP_MODES = ("background", "zero")


class StageError(RuntimeError):
    """Failure inside one stage of pattern generation."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class TargetStack:
    grid: VoxelGrid
    background: float
    iteration_count: int = 0
    flagged_voxels: int = 0
    part: np.ndarray | None = None  # binary part mask [z, y, x]


@dataclass
class PatternStack:
    frames: ImageStack
    angle_step_deg: float
    vertical_prestretch: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.frames.frames < 0):
            raise ValueError("projector patterns cannot be negative")

    @property
    def n_patterns(self) -> int:
        return self.frames.n_frames


@dataclass
class PatternOptions:
    dims: tuple[int, int, int] = (128, 128, 96)
    spacing_mm: float = 0.155
    background: float = 0.5
    iterations: int = 1
    angle_step_deg: float = 1.0
    clip: str = "background"
    absorption: bool = True
    vertical_stretch: float | None = None  # None: use the paraxial M_vp
    n_detectors: int | None = None


def slice_grid_for(opts: PatternOptions) -> VoxelGrid:
    return VoxelGrid.centered(opts.dims, (opts.spacing_mm,) * 3, dtype=np.float32)


def slice_mesh(mesh: TriMesh, grid: VoxelGrid, vertical_stretch: float = 1.0) -> VoxelGrid:
    """Binary voxelization; z is stretched by ``1 / vertical_stretch`` before sampling."""
    if not vertical_stretch > 0:
        raise ValueError("vertical_stretch must be positive")
    m = mesh.transformed(scale=(1.0, 1.0, 1.0 / vertical_stretch))
    inside = voxelize(m, grid.axis_coords("x"), grid.axis_coords("y"), grid.axis_coords("z"))
    return grid.with_values(inside.astype(np.float32))


def build_target(binary: VoxelGrid, background: float = 0.5) -> TargetStack:
    """Empty voxels are raised to the background level ``B``."""
    if not 0 < background < 1:
        raise ValueError("background level must lie in (0, 1)")
    v = np.asarray(binary.values)
    if not np.all((v == 0) | (v == 1)):
        raise ValueError("build_target expects a binary grid")
    part = v.astype(bool)
    vals = np.where(part, 1.0, background).astype(np.float32)
    return TargetStack(binary.with_values(vals), background, 0, 0, part)


def default_detectors(grid_spec: GridSpec) -> tuple[int, float]:
    """Detector count and pitch covering the slice diagonal at the grid pitch."""
    n = int(np.ceil(np.hypot(grid_spec.nx, grid_spec.ny))) + 2
    n += (n + grid_spec.nx) % 2  # keep the centre bin aligned with the grid centre parity
    return n, grid_spec.spacing_mm


def filtered_nonneg_sinogram(target_slice, background, angles_deg, spacing_mm, n_detectors=None,
                             clip: str = "background") -> Sinogram:
    """Radon, ramp filter, then lift every sample below the clip level to it.

    ``clip="background"`` clips at ``background``; ``clip="zero"`` at 0.
    """
    if clip not in CLIP_MODES:
        raise ValueError(f"clip must be one of {CLIP_MODES}")
    img = np.asarray(target_slice, dtype=float)
    g = GridSpec(img.shape[1], img.shape[0], spacing_mm)
    n_det, pitch = default_detectors(g) if n_detectors is None else (n_detectors, spacing_mm)
    sino = ramp_filter(radon(img, spacing_mm, angles_deg, n_det, pitch))
    level = background if clip == "background" else 0.0
    return sino.with_values(np.maximum(sino.values, level))


def default_angles(step_deg: float = 1.0) -> np.ndarray:
    n = int(round(360.0 / step_deg))
    if not np.isclose(n * step_deg, 360.0):
        raise ValueError("angle step must divide 360 degrees")
    return np.arange(n) * step_deg


def simulated_dose(target_slice, background, angles_deg, spacing_mm, clip="background") -> np.ndarray:
    """Dose delivered by the filtered non-negative sinogram of one slice (no absorption)."""
    img = np.asarray(target_slice, dtype=float)
    sino = filtered_nonneg_sinogram(img, background, angles_deg, spacing_mm, clip=clip)
    return backproject(sino, GridSpec(img.shape[1], img.shape[0], spacing_mm))


def normalize_iteration(target: TargetStack, n_iters: int = 1, angles_deg=None, clip="background",
                        original: np.ndarray | None = None) -> TargetStack:
    """Dose-normalization passes: I <- I_0 / (D(I) / I_0), slice by slice.

    ``I_0`` is the original target each time.  Where the normalization
    coefficient falls below ``NORMALIZATION_EPS`` it is floored and the voxel
    counted in ``flagged_voxels``.
    """
    if n_iters < 0:
        raise ValueError("n_iters must be >= 0")
    if n_iters == 0:
        return target
    angles = default_angles() if angles_deg is None else np.asarray(angles_deg, dtype=float)
    spacing = target.grid.slice_grid().spacing_mm
    i0 = np.asarray(target.grid.values if original is None else original, dtype=float)
    cur = i0.copy()
    flagged = 0
    for _ in range(n_iters):
        nxt = np.zeros_like(cur)
        for k in range(cur.shape[0]):
            has_part = target.part[k].any() if target.part is not None else np.any(i0[k] > target.background)
            if not has_part:
                nxt[k] = i0[k]
                continue
            dose = simulated_dose(cur[k], target.background, angles, spacing, clip)
            active = i0[k] > 0
            with np.errstate(divide="ignore", invalid="ignore"):
                n = np.where(active, dose / np.where(active, i0[k], 1.0), 0.0)
            low = active & (n < NORMALIZATION_EPS)
            flagged += int(low.sum())
            n = np.maximum(n, NORMALIZATION_EPS)
            nxt[k] = np.where(active, i0[k] / n, 0.0)
        cur = nxt
    return replace(target, grid=target.grid.with_values(cur.astype(np.float32)),
                   iteration_count=target.iteration_count + n_iters, flagged_voxels=target.flagged_voxels + flagged)


def disk_absorption_map(cfg: OpticalConfig, grid_spec: GridSpec, angles_deg=None, mu_a=None) -> np.ndarray:
    """Dose from trying to print a uniform disk filling the addressable radius, with absorption.

    Normalized to a maximum of 1 inside the disk; zero outside.
    """
    g = grid_spec if isinstance(grid_spec, GridSpec) else grid_spec.slice_grid()
    angles = default_angles() if angles_deg is None else np.asarray(angles_deg, dtype=float)
    mu = cfg.attenuation_mu_a if mu_a is None else mu_a
    if mu < 0:
        raise ValueError("attenuation must be non-negative")
    r = g.radius()
    disk = (r <= cfg.addressable_radius_mm).astype(float)
    sino = filtered_nonneg_sinogram(disk, 0.0, angles, g.spacing_mm, clip="zero")
    dose = attenuated_backproject(sino, g, mu, cfg.vial_radius_mm)
    dose = np.where(disk > 0, dose, 0.0)
    return dose / dose.max()


def addressable_mask(cfg: OpticalConfig, grid_spec: GridSpec) -> np.ndarray:
    return grid_spec.radius() <= cfg.addressable_radius_mm


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - attribute and re-raise
        raise StageError(name, exc) from exc


def compute_patterns(mesh: TriMesh, cfg: OpticalConfig, options: PatternOptions | None = None) -> PatternStack:
    """Full chain from a mesh to physical projector frames.

    Slices without any part get dark patterns.  The part must lie inside the
    addressable disk; the target is zero outside it.
    """
    opts = options or PatternOptions()
    grid = slice_grid_for(opts)
    gspec = grid.slice_grid()
    stretch = vertical_magnifications(cfg)[0] if opts.vertical_stretch is None else opts.vertical_stretch
    angles = default_angles(opts.angle_step_deg)

    binary = _stage("slice", slice_mesh, mesh, grid, stretch)
    disk = addressable_mask(cfg, gspec)
    part = binary.values.astype(bool)
    if np.any(part & ~disk[None]):
        raise StageError("target", ValueError("part extends beyond the addressable radius"))
    target = _stage("target", build_target, binary, opts.background)
    vals = np.where(disk[None], target.grid.values, 0.0).astype(np.float32)
    target = replace(target, grid=target.grid.with_values(vals))
    target = _stage("normalize", normalize_iteration, target, opts.iterations, angles, opts.clip)

    corrected = np.asarray(target.grid.values, dtype=float)
    if opts.absorption and cfg.attenuation_mu_a > 0:
        dd = _stage("absorption", disk_absorption_map, cfg, gspec, angles)
        ok = dd > NORMALIZATION_EPS * dd.max()
        corrected = np.where(ok[None], corrected / np.where(ok, dd, 1.0)[None], corrected)

    cols = projector_columns(cfg)
    n_det, pitch = default_detectors(gspec)
    frames = np.zeros((len(angles), grid.nz, len(cols)), dtype=np.float32)
    has_part = part.reshape(grid.nz, -1).any(axis=1)
    for k in np.flatnonzero(has_part):
        sino = _stage("filter", filtered_nonneg_sinogram, corrected[k], opts.background, angles, gspec.spacing_mm,
                      n_det, opts.clip)
        phys = _stage("resample", resample_projection, sino, cfg, cols, angles)
        frames[:, k, :] = phys.values
    stack = ImageStack(frames, angles, cfg.projector_pixel_mm, opts.spacing_mm,
                       meta={"config_hash": cfg.config_hash(), "row_z0_mm": float(grid.origin_mm[2])})
    return PatternStack(stack, opts.angle_step_deg, stretch,
                        meta={"dims": tuple(opts.dims), "spacing_mm": opts.spacing_mm, "background": opts.background, "iterations": opts.iterations, "clip": opts.clip,
                              "absorption": bool(opts.absorption), "flagged_voxels": target.flagged_voxels})


def separation(dose, part, region=None) -> float:
    """Smallest in-part dose minus largest out-of-part dose over ``region``."""
    part = np.asarray(part, dtype=bool)
    region = np.ones_like(part) if region is None else np.asarray(region, dtype=bool)
    return float(np.min(dose[part & region]) - np.max(dose[~part & region]))


def separation_stages(part_slice, background=0.5, angles_deg=None, spacing_mm=0.155, clip="zero", region=None):
    """Separation of the simulated dose after each generation stage.

    Returns ``{"raw": ..., "background": ..., "iteration": ...}`` for the
    plain non-negative FBP target, the target lifted to ``background`` and
    the target after one normalization pass.  ``region`` (default: the
    whole slice) limits the voxels that are scored and the target support.
    """
    part = np.asarray(part_slice, dtype=bool)
    region = np.ones_like(part) if region is None else np.asarray(region, dtype=bool)
    angles = default_angles() if angles_deg is None else np.asarray(angles_deg, dtype=float)
    raw = simulated_dose(part.astype(float), 0.0, angles, spacing_mm, clip="zero")
    target = np.where(part, 1.0, background) * region
    lifted = simulated_dose(target, background, angles, spacing_mm, clip=clip)
    grid = VoxelGrid.centered((part.shape[1], part.shape[0], 1), (spacing_mm,) * 3, target[None])
    ts = TargetStack(grid, background, part=part[None])
    iterated = normalize_iteration(ts, 1, angles, clip=clip).grid.values[0]
    once = simulated_dose(iterated, background, angles, spacing_mm, clip=clip)
    return {name: separation(d, part, region) for name, d in
            (("raw", raw), ("background", lifted), ("iteration", once))}
