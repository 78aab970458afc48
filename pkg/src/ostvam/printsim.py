"""Virtual printer and scatter camera.

Everything here is traced numerically with Snell's law at the vial circle;
none of the closed-form remaps are used, so agreement between the two is a
genuine check.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import _kernels
from .grids import ImageStack, VoxelGrid
from .remap import OpticalConfig


class RayMissError(ValueError):
    pass


@dataclass
class Chord:
    """Straight in-resin ray segment in the frame of one view.

    ``offset_mm`` and ``angle_deg`` are the Radon parameters of the chord
    (direction ``(-sin a, cos a)``, offset ``p . (cos a, sin a)``).
    """

    offset_mm: np.ndarray
    angle_deg: np.ndarray
    entry_point: np.ndarray
    exit_point: np.ndarray
    in_resin_length_mm: np.ndarray
    direction: np.ndarray


def _source_directions(x, source, cfg):
    if source == "projector":
        slope = x / cfg.throw_distance_mm
        d = np.stack([slope, np.ones_like(slope)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)
    if source == "camera":
        psi = x / cfg.camera_distance_mm
        return np.stack([np.sin(psi), np.cos(psi)], axis=-1)
    raise ValueError("source must be 'projector' or 'camera'")


def trace_ray(entry_coord_mm, source: str, cfg: OpticalConfig, strict: bool = True) -> Chord:
    """Refract the ray through (x, 0) at the vial circle and return its chord.

    ``entry_coord_mm`` may be an array.  With ``strict=False`` missing rays
    come back as NaN.
    """
    x = np.asarray(entry_coord_mm, dtype=float)
    r = cfg.vial_radius_mm
    n2 = cfg.n_resin_blue if source == "projector" else cfg.n_resin_red
    eta = cfg.n_outside / n2
    d = _source_directions(x, source, cfg)
    p0 = np.stack([x, np.zeros_like(x)], axis=-1)
    # |p0 + t d|^2 = r^2, entry is the smaller root
    b = np.sum(p0 * d, axis=-1)
    c = np.sum(p0 * p0, axis=-1) - r * r
    disc = b * b - c
    miss = disc < 0
    if strict and np.any(miss):
        raise RayMissError("ray misses vial")
    t_in = -b - np.sqrt(np.where(miss, np.nan, disc))
    p = p0 + t_in[..., None] * d
    normal = p / r
    cos_i = np.clip(-np.sum(normal * d, axis=-1), 0.0, 1.0)
    k = 1.0 - eta * eta * (1.0 - cos_i * cos_i)
    assert np.all(k[~miss] >= 0), "total internal reflection cannot happen entering a denser medium"
    t = eta * d + (eta * cos_i - np.sqrt(np.clip(k, 0.0, None)))[..., None] * normal
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    length = -2.0 * np.sum(p * t, axis=-1)
    exit_ = p + length[..., None] * t
    a = np.arctan2(-t[..., 0], t[..., 1])
    offset = p[..., 0] * np.cos(a) + p[..., 1] * np.sin(a)
    return Chord(offset, np.rad2deg(a), p, exit_, length, t)


def vertical_magnification_projector(cfg: OpticalConfig, height_mm: float = 1e-3) -> float:
    """Projected height at the axis over the intended height, by exact tracing of the central column."""
    L = cfg.throw_distance_mm
    r = cfg.vial_radius_mm
    beta = np.arctan(height_mm / L)
    beta_in = np.arcsin(cfg.n_outside * np.sin(beta) / cfg.n_resin_blue)
    arrived = (L - r) * np.tan(beta) + r * np.tan(beta_in)
    return float(arrived / height_mm)


def vertical_magnification_camera(cfg: OpticalConfig, height_mm: float = 1e-3) -> float:
    """Apparent over true height of an on-axis scatterer seen by a pinhole at distance D."""
    D = cfg.camera_distance_mm
    r = cfg.vial_radius_mm
    ratio = cfg.n_resin_red / cfg.n_outside

    def miss(g):
        g_out = np.arcsin(np.clip(ratio * np.sin(g), -1, 1))
        return height_mm - r * np.tan(g) - (D - r) * np.tan(g_out)

    g = brentq(miss, 0.0, np.arcsin(1.0 / ratio) * 0.999, xtol=1e-18, rtol=1e-15)
    g_out = np.arcsin(ratio * np.sin(g))
    return float(D * np.tan(g_out) / height_mm)


def ray_reach(source: str, cfg: OpticalConfig) -> float:
    """Largest entry coordinate whose ray still meets the vial (found numerically)."""
    r = cfg.vial_radius_mm

    def clearance(x):
        d = _source_directions(np.array([x]), source, cfg)[0]
        return r - abs(x * d[1])  # distance from the axis to the ray through (x, 0)

    hi = 2 * r
    while clearance(hi) > 0:
        hi *= 2
    return float(brentq(clearance, r * 0.5, hi, xtol=1e-13))


def _rotate(v, angle_deg):
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


def _traced(x, source, cfg):
    chord = trace_ray(x, source, cfg, strict=False)
    ok = np.isfinite(chord.in_resin_length_mm) & (chord.in_resin_length_mm > 0)
    return chord, ok


# schedule and dose ------------------------------------------------------------


@dataclass
class Schedule:
    """Timing of a print; stage angle grows at ``rotation_speed_deg_s``."""

    rotation_speed_deg_s: float = 20.0
    projector_fps: float = 32.0
    camera_fps: float = 10.0
    rotations: int = 20
    stop_rotation: int | None = None

    def __post_init__(self):
        if not (self.rotation_speed_deg_s > 0 and self.projector_fps > 0 and self.camera_fps > 0):
            raise ValueError("speeds and frame rates must be positive")
        if self.rotations < 1:
            raise ValueError("at least one rotation is required")
        if self.stop_rotation is not None and not 0 <= self.stop_rotation <= self.rotations:
            raise ValueError("stop_rotation must lie in [0, rotations]")

    @property
    def refresh_step_deg(self) -> float:
        return self.rotation_speed_deg_s / self.projector_fps

    @property
    def camera_step_deg(self) -> float:
        return self.rotation_speed_deg_s / self.camera_fps

    @property
    def refreshes_per_rotation(self) -> float:
        return 360.0 / self.refresh_step_deg

    @property
    def lit_rotations(self) -> int:
        return self.rotations if self.stop_rotation is None else self.stop_rotation

    def is_periodic(self) -> bool:
        n = self.refreshes_per_rotation
        return abs(n - round(n)) < 1e-9

    def refresh_angles(self, start_rotation: int = 0, n_rotations: int = 1) -> np.ndarray:
        """Stage angle at the start of every projector refresh in the given rotations."""
        step = self.refresh_step_deg
        i0 = int(np.ceil(start_rotation * 360.0 / step - 1e-9))
        i1 = int(np.ceil((start_rotation + n_rotations) * 360.0 / step - 1e-9))
        return np.arange(i0, i1) * step

    def camera_angles(self, rotation: int) -> np.ndarray:
        n = int(round(360.0 / self.camera_step_deg))
        return 360.0 * rotation + np.arange(n) * self.camera_step_deg


def pattern_index(angle_deg, n_patterns: int, angle_step_deg: float):
    """Pattern shown at a stage angle: the one computed for the nearest angle."""
    return np.rint(np.mod(angle_deg, 360.0) / angle_step_deg).astype(np.int64) % n_patterns


def _row_weights(patterns, grid: VoxelGrid, m_vp: float) -> np.ndarray:
    """(n_vox_z, n_rows) linear interpolation from pattern rows to vial heights.

    A vial height ``z`` is lit by the row intended for ``z / m_vp``.
    """
    st = patterns.frames
    z0 = st.meta.get("row_z0_mm", -(st.n_rows - 1) / 2 * st.row_pitch_mm)
    idx = (grid.axis_coords("z") / m_vp - z0) / st.row_pitch_mm
    w = np.zeros((grid.nz, st.n_rows))
    lo = np.floor(idx).astype(int)
    frac = idx - lo
    for k in range(grid.nz):
        for j, f in ((lo[k], 1 - frac[k]), (lo[k] + 1, frac[k])):
            if 0 <= j < st.n_rows and f > 0:
                w[k, j] += f
    return w


def dose_grid_for(patterns) -> VoxelGrid:
    """Vial-space grid matching the pattern slicing grid (design coordinates)."""
    st = patterns.frames
    dims = patterns.meta.get("dims")
    spacing = patterns.meta.get("spacing_mm", st.row_pitch_mm)
    if dims is None:
        raise ValueError("pattern stack does not record its slicing grid")
    return VoxelGrid.centered(dims, (spacing,) * 3)


def _deposit(dose, grid, cfg, chord, ok, angle_deg, weights, mu):
    p = _rotate(chord.entry_point[ok], angle_deg)
    d = _rotate(chord.direction[ok], angle_deg)
    h = grid.spacing_mm[0]
    _kernels.deposit_rays(
        dose, np.ascontiguousarray(p), np.ascontiguousarray(d),
        np.ascontiguousarray(chord.in_resin_length_mm[ok]), np.zeros(int(ok.sum())),
        np.ascontiguousarray(weights[ok], dtype=float), float(mu),
        grid.origin_mm[0] - h / 2, grid.origin_mm[1] - h / 2, h,
    )


def accumulate_dose(patterns, cfg: OpticalConfig, schedule: Schedule, grid: VoxelGrid | None = None,
                    periodic: bool = True) -> list[VoxelGrid]:
    """Cumulative absorbed dose after each rotation.

    Every projector refresh shows the pattern nearest the current stage angle
    for one refresh period; its rays are traced through the vial, rotated into
    the vial frame at the mid-period angle and deposited with Beer-Lambert
    loss from the entry point.  A ray's weight is its pattern value times the
    projector pixel width, so refraction changes fluence but not power.
    With ``periodic`` and a whole number of refreshes per rotation one
    rotation is simulated and scaled.
    """
    grid = dose_grid_for(patterns) if grid is None else grid
    if grid.spacing_mm[0] != grid.spacing_mm[1]:
        raise ValueError("dose grid needs square in-plane voxels")
    st = patterns.frames
    n_pat = st.n_frames
    step = patterns.angle_step_deg
    if not np.isclose(n_pat * step, 360.0):
        raise ValueError(f"{n_pat} patterns at {step} deg do not cover one rotation")
    cols = st.col_coords()
    chord, ok = _traced(cols, "projector", cfg)
    m_vp = vertical_magnification_projector(cfg)
    rows = _row_weights(patterns, grid, m_vp)
    mu = cfg.attenuation_mu_a
    scale = st.pixel_mm
    lit = schedule.lit_rotations
    active = [k for k in range(n_pat) if np.any(st.frames[k])]

    def one_pass(angles):
        dose = np.zeros((grid.ny, grid.nx, grid.nz))
        if not active:
            return dose
        idx = pattern_index(angles, n_pat, step)
        for a, k in zip(angles, idx):
            w = np.asarray(st.frames[k], dtype=float)
            if not w.any():
                continue
            weights = scale * (w.T @ rows.T)  # (cols, nz)
            _deposit(dose, grid, cfg, chord, ok, a + 0.5 * schedule.refresh_step_deg, weights, mu)
        return dose

    snaps = []
    if periodic and schedule.is_periodic():
        d1 = one_pass(schedule.refresh_angles(0, 1)) if lit > 0 else None
        for r in range(schedule.rotations):
            k = min(r + 1, lit)
            vals = np.zeros(grid.values.shape, np.float32) if k == 0 else (k * d1).transpose(2, 0, 1).astype(np.float32)
            snaps.append(grid.with_values(vals))
        return snaps
    total = np.zeros((grid.ny, grid.nx, grid.nz))
    for r in range(schedule.rotations):
        if r < lit:
            total = total + one_pass(schedule.refresh_angles(r, 1))
        snaps.append(grid.with_values(total.transpose(2, 0, 1).astype(np.float32)))
    return snaps


def gel_field(dose: VoxelGrid, d_gel: float, ramp_width_frac: float = 0.05) -> VoxelGrid:
    """Scatter density: 0 below ``d_gel (1 - w)``, 1 above ``d_gel (1 + w)``, linear between."""
    if not d_gel > 0:
        raise ValueError("gel threshold must be positive")
    if ramp_width_frac < 0:
        raise ValueError("ramp width must be non-negative")
    v = np.asarray(dose.values, dtype=float)
    if ramp_width_frac == 0:
        out = (v >= d_gel).astype(float)
    else:
        lo = d_gel * (1 - ramp_width_frac)
        out = np.clip((v - lo) / (2 * ramp_width_frac * d_gel), 0.0, 1.0)
    return dose.with_values(out)


def calibrate_gel_threshold(dose: VoxelGrid, design: np.ndarray) -> float:
    """Dose threshold whose gelled region best matches the design (fewest differing voxels)."""
    v = np.asarray(dose.values, dtype=float).ravel()
    inside = np.asarray(design, dtype=bool).ravel()
    if not inside.any():
        raise ValueError("design mask is empty")
    order = np.argsort(v)[::-1]
    vs = v[order]
    hits = np.cumsum(inside[order])
    # gelling the top k voxels: misses = (n_in - hits) + (k - hits)
    k = np.arange(1, len(v) + 1)
    xor = inside.sum() - 2 * hits + k
    # only cut between distinct dose values
    valid = np.r_[vs[1:] < vs[:-1], True]
    best = np.argmin(np.where(valid, xor, np.iinfo(np.int64).max))
    nxt = vs[best + 1] if best + 1 < len(vs) else 0.0
    thr = 0.5 * (vs[best] + nxt)
    if not thr > 0:
        raise ValueError("design cannot be matched by any positive dose threshold")
    return float(thr)


# camera -------------------------------------------------------------------------


def camera_pixels(cfg: OpticalConfig, pixel_mm: float | None = None) -> np.ndarray:
    pitch = cfg.camera_pixel_mm if pixel_mm is None else pixel_mm
    half = int(np.ceil(ray_reach("camera", cfg) / pitch))
    return (np.arange(2 * half + 1) - half) * pitch


def render_frames(scatter: VoxelGrid, cfg: OpticalConfig, angles_deg, row_pitch_mm: float | None = None,
                  n_rows: int | None = None, subrays: int = 3, noise_scale: float | None = None,
                  seed: int | None = None, view_offset_deg: float = 90.0) -> ImageStack:
    """Darkfield frames: scatter density integrated along traced camera rays.

    Each pixel averages ``subrays`` rays across its width.  Image row ``y``
    shows the vial height ``y / M_vi`` (vertical magnification found by
    tracing).  ``noise_scale`` enables scaled-Poisson noise.
    """
    angles = np.asarray(angles_deg, dtype=float)
    h = scatter.spacing_mm[0]
    pitch = row_pitch_mm or scatter.spacing_mm[2]
    n_rows = n_rows or scatter.nz
    cols = camera_pixels(cfg)
    px = cfg.camera_pixel_mm
    sub = ((np.arange(subrays) + 0.5) / subrays - 0.5) * px
    x = (cols[:, None] + sub[None, :]).ravel()
    chord, ok = _traced(x, "camera", cfg)
    m_vi = vertical_magnification_camera(cfg)
    y_img = (np.arange(n_rows) - (n_rows - 1) / 2) * pitch
    zq = y_img / m_vi
    zc = scatter.axis_coords("z")
    field = np.ascontiguousarray(np.asarray(scatter.values, dtype=float).transpose(1, 2, 0))
    frames = np.zeros((len(angles), n_rows, len(cols)), dtype=np.float32)
    if field.any():
        zi = np.interp(zq, zc, np.arange(len(zc)), left=-1, right=-1)
        lo = np.clip(np.floor(zi).astype(int), 0, len(zc) - 1)
        hi = np.clip(lo + 1, 0, len(zc) - 1)
        fr = zi - np.floor(zi)
        outside = zi < 0
        for i, a in enumerate(angles):
            p = _rotate(chord.entry_point[ok], a + view_offset_deg)
            d = _rotate(chord.direction[ok], a + view_offset_deg)
            acc = np.zeros((len(x), len(zc)))
            acc[ok] = _kernels.integrate_rays(
                field, np.ascontiguousarray(p), np.ascontiguousarray(d),
                np.ascontiguousarray(chord.in_resin_length_mm[ok]),
                scatter.origin_mm[0] - h / 2, scatter.origin_mm[1] - h / 2, h,
            )
            img = acc.reshape(len(cols), subrays, len(zc)).mean(axis=1)
            rowsv = img[:, lo] * (1 - fr) + img[:, hi] * fr
            rowsv[:, outside] = 0.0
            frames[i] = rowsv.T
    if noise_scale:
        rng = np.random.default_rng(seed)
        frames = (rng.poisson(np.maximum(frames, 0) * noise_scale) / noise_scale).astype(np.float32)
    return ImageStack(frames, angles, px, pitch, meta={"config_hash": cfg.config_hash()})


# sessions -------------------------------------------------------------------------


@dataclass
class SessionOptions:
    patterns: object = None  # projgen.PatternOptions; None for defaults
    schedule: Schedule = field(default_factory=Schedule)
    d_gel: float | None = None  # None: calibrated against the design
    ramp_width_frac: float = 0.05
    render: str = "all"  # "all" rotations or only the "last"
    subrays: int = 3
    noise_scale: float | None = None
    seed: int = 0


@dataclass
class PrintSession:
    cfg: OpticalConfig
    patterns: object
    schedule: Schedule
    d_gel: float
    dose_snapshots: list
    truth_gel: list
    frames: ImageStack
    design: VoxelGrid
    ramp_width_frac: float = 0.05

    @property
    def stop_rotation(self):
        return self.schedule.stop_rotation

    def scatter(self, rotation: int = -1) -> VoxelGrid:
        return gel_field(self.dose_snapshots[rotation], self.d_gel, self.ramp_width_frac)

    def truth_mesh(self, rotation: int = -1):
        """Dose isosurface at the gel threshold."""
        from .mesh import mesh_from_field

        g = self.dose_snapshots[rotation]
        return mesh_from_field(np.asarray(g.values, dtype=float), g.spacing_mm, g.origin_mm, level=self.d_gel)


def design_mask(mesh, grid: VoxelGrid) -> np.ndarray:
    from .mesh import voxelize

    return voxelize(mesh, grid.axis_coords("x"), grid.axis_coords("y"), grid.axis_coords("z"))


def run_session(mesh, cfg: OpticalConfig, options: SessionOptions | None = None, patterns=None) -> PrintSession:
    """Patterns, dose per rotation, gel, and camera frames for a whole print."""
    from .projgen import compute_patterns

    opts = options or SessionOptions()
    sched = opts.schedule
    pats = patterns if patterns is not None else compute_patterns(mesh, cfg, opts.patterns)
    snaps = accumulate_dose(pats, cfg, sched)
    design = snaps[0].with_values(design_mask(mesh, snaps[0]))
    if opts.d_gel is not None:
        d_gel = float(opts.d_gel)
    elif sched.lit_rotations > 0:
        d_gel = calibrate_gel_threshold(snaps[-1], design.values)
    else:
        d_gel = cfg.gel_dose_threshold
    truth = [s.with_values(np.asarray(s.values) >= d_gel) for s in snaps]
    stacks = []
    prev = None
    render_from = 0 if opts.render == "all" else sched.rotations - 1
    for r in range(render_from, sched.rotations):
        angles = sched.camera_angles(r)
        unchanged = prev is not None and r > 0 and np.array_equal(snaps[r].values, snaps[r - 1].values)
        if unchanged:
            st = ImageStack(prev.frames.copy(), angles, prev.pixel_mm, prev.row_pitch_mm, meta=prev.meta)
        else:
            scatter = gel_field(snaps[r], d_gel, opts.ramp_width_frac)
            st = render_frames(scatter, cfg, angles, subrays=opts.subrays)
        prev = st
        stacks.append(st)
    frames = ImageStack.concatenate(stacks)
    if opts.noise_scale:
        rng = np.random.default_rng(opts.seed)
        noisy = rng.poisson(np.maximum(frames.frames, 0) * opts.noise_scale) / opts.noise_scale
        frames = ImageStack(noisy.astype(np.float32), frames.angles_deg, frames.pixel_mm, frames.row_pitch_mm,
                            meta=frames.meta)
    frames.meta.update({"rotations": sched.rotations, "first_rotation": render_from})
    return PrintSession(cfg, pats, sched, d_gel, snaps, truth, frames, design, opts.ramp_width_frac)
