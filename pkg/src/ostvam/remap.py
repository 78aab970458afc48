"""Closed-form maps between physical (refracted, diverging) and virtual
(parallel-beam) detector coordinates, for the projector and the camera.

Geometry, in the frame of one view: the incoming ray travels roughly along
+y and crosses the plane y = 0 (through the vial axis) at the physical
coordinate ``x``, with slope ``s = dx/dy``.  For the projector
``s = x / L`` with ``L = T_r * W * pixel``; for the camera ``s = tan(x / D)``
(``x / D`` is the field angle).  After one refraction at the circle of
radius ``R`` the ray follows a straight chord.  The chord, read as a Radon
line, has angle ``delta`` relative to the view and offset ``x_virtual``.
Both depend only on ``x``.

The projector view coincides with the Radon angle of the stage; the camera
looks along an axis rotated by ``CAMERA_VIEW_OFFSET_DEG``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .grids import ImageStack, Sinogram, centered_coords

CAMERA_VIEW_OFFSET_DEG = 90.0
SIDES = ("projector", "camera")


class RayMissError(ValueError):
    """A ray does not intersect the vial, or a target lies outside the reachable span."""


@dataclass(frozen=True)
class OpticalConfig:
    vial_radius_mm: float = 12.4
    n_outside: float = 1.0
    n_resin_blue: float = 1.55
    n_resin_red: float = 1.53
    throw_ratio: float = 1.8
    projector_width_px: float = 1024
    projector_pixel_mm: float = 0.065
    camera_distance_mm: float = 150.0
    camera_pixel_mm: float = 0.155 * 1.53
    attenuation_mu_a: float = 1 / 12.4
    gel_dose_threshold: float = 1.0

    def __post_init__(self):
        checks = [
            (self.vial_radius_mm > 0, "vial_radius_mm must be > 0"),
            (self.n_outside >= 1, "n_outside must be >= 1"),
            (self.n_resin_blue >= self.n_outside, "n_resin_blue must be >= n_outside"),
            (self.n_resin_red >= self.n_outside, "n_resin_red must be >= n_outside"),
            (self.throw_ratio > 0, "throw_ratio must be > 0"),
            (self.projector_width_px >= 1, "projector_width_px must be >= 1"),
            (self.projector_pixel_mm > 0, "projector_pixel_mm must be > 0"),
            (self.camera_distance_mm > self.vial_radius_mm, "camera_distance_mm must exceed the vial radius"),
            (self.camera_pixel_mm > 0, "camera_pixel_mm must be > 0"),
            (self.attenuation_mu_a >= 0, "attenuation_mu_a must be >= 0"),
            (self.gel_dose_threshold > 0, "gel_dose_threshold must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        # throw distance must clear the vial
        if self.throw_distance_mm <= self.vial_radius_mm:
            raise ValueError("projector throw distance must exceed the vial radius")

    @property
    def throw_distance_mm(self) -> float:
        return self.throw_ratio * self.projector_width_px * self.projector_pixel_mm

    @property
    def addressable_radius_mm(self) -> float:
        return self.vial_radius_mm * self.n_outside / self.n_resin_blue

    @property
    def imaging_radius_mm(self) -> float:
        return self.vial_radius_mm * self.n_outside / self.n_resin_red

    @property
    def virtual_camera_pixel_mm(self) -> float:
        return self.camera_pixel_mm * self.n_outside / self.n_resin_red

    def index_ratio(self, side: str) -> float:
        n2 = self.n_resin_blue if side == "projector" else self.n_resin_red
        return self.n_outside / n2

    def replace(self, **changes) -> "OpticalConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "OpticalConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown OpticalConfig fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    @classmethod
    def from_json(cls, path) -> "OpticalConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def preset(cls, name: str) -> "OpticalConfig":
        try:
            n_blue, n_red = PRESET_INDICES[name.lower()]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESET_INDICES)}") from None
        return cls(n_resin_blue=n_blue, n_resin_red=n_red, camera_pixel_mm=0.155 * n_red)


PRESET_INDICES = {"bpagda": (1.55, 1.53), "dudma": (1.49, 1.48)}


@dataclass
class RayMapSample:
    """Per-coordinate map values; arrays broadcast with the input coordinate."""

    x_star_mm: np.ndarray
    incidence_deg: np.ndarray
    delta_deg: np.ndarray
    x_virtual_mm: np.ndarray
    theta_v_deg: np.ndarray


def _slope(x, side, cfg):
    if side == "projector":
        return x / cfg.throw_distance_mm
    if side == "camera":
        return np.tan(x / cfg.camera_distance_mm)
    raise ValueError(f"side must be one of {SIDES}")


def _map(x, side, cfg, strict):
    x = np.asarray(x, dtype=float)
    r = cfg.vial_radius_mm
    eta = cfg.index_ratio(side)
    s = _slope(x, side, cfg)
    alpha = 1.0 + s * s
    disc = alpha * r * r - x * x
    miss = disc < 0
    if strict and np.any(miss):
        raise RayMissError("ray misses vial")
    root = np.sqrt(np.where(miss, np.nan, disc))
    x_star = (x - s * root) / alpha
    # clamp round-off at grazing incidence
    u = np.clip(x_star / r, -1.0, 1.0)
    a_surf = np.arcsin(u)
    if side == "projector":
        inc = a_surf + np.arctan(s)
    else:
        inc = a_surf + x / cfg.camera_distance_mm
    delta = a_surf - np.arcsin(np.clip(eta * np.sin(inc), -1.0, 1.0))
    x_v = x_star * np.cos(delta) - np.sqrt(np.clip(r * r - x_star * x_star, 0.0, None)) * np.sin(delta)
    return x_star, inc, delta, x_v


def map_projector(x_p_mm, theta_deg, cfg: OpticalConfig, strict: bool = True) -> RayMapSample:
    """Physical projector column ``x_p_mm`` at stage angle ``theta_deg`` to virtual (x_v, theta_v).

    With ``strict=False`` missing rays give NaN instead of raising.
    """
    x_star, inc, delta, x_v = _map(x_p_mm, "projector", cfg, strict)
    d = np.rad2deg(delta)
    return RayMapSample(x_star, np.rad2deg(inc), d, x_v, np.asarray(theta_deg, dtype=float) + d)


def map_camera(x_c_mm, theta_deg, cfg: OpticalConfig, strict: bool = True) -> RayMapSample:
    """Physical camera column ``x_c_mm`` (object space, vial mid-plane) to virtual (x_vc, theta_v).

    ``theta_deg`` is the view angle of the camera in the Radon convention.
    """
    x_star, inc, delta, x_v = _map(x_c_mm, "camera", cfg, strict)
    d = np.rad2deg(delta)
    return RayMapSample(x_star, np.rad2deg(inc), d, x_v, np.asarray(theta_deg, dtype=float) + d)


def physical_reach(side: str, cfg: OpticalConfig) -> float:
    """Largest physical |x| whose ray still meets the vial (grazing incidence)."""
    r = cfg.vial_radius_mm
    if side == "projector":
        return r / np.sqrt(1.0 - (r / cfg.throw_distance_mm) ** 2)
    if side != "camera":
        raise ValueError(f"side must be one of {SIDES}")
    # x cos(x/D) = R; the left side is increasing on [R, R / cos(R/D)]
    d = cfg.camera_distance_mm
    lo, hi = r, r / np.cos(min(1.5, 2 * r / d))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid * np.cos(mid / d) <= r:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * r:
            break
    return lo


def virtual_reach(side: str, cfg: OpticalConfig) -> float:
    return float(_map(physical_reach(side, cfg), side, cfg, strict=False)[3])


def invert_detector_map(x_virtual_mm, side: str, cfg: OpticalConfig, tol_mm: float = 1e-12, return_steps=False):
    """Physical coordinate whose virtual image is ``x_virtual_mm`` (vectorized bisection).

    The forward map is odd and increasing, so the search runs on |target|
    over [0, physical_reach].
    """
    target = np.asarray(x_virtual_mm, dtype=float)
    reach = physical_reach(side, cfg)
    vmax = virtual_reach(side, cfg)
    mag = np.abs(target)
    if np.any(mag > vmax * (1 + 1e-12)):
        raise RayMissError(f"virtual target beyond reachable span {vmax:.6f} mm")
    lo = np.zeros_like(mag)
    hi = np.full_like(mag, reach)
    steps = 0
    while steps < 60 and np.max(hi - lo, initial=0.0) > tol_mm:
        mid = 0.5 * (lo + hi)
        below = _map(mid, side, cfg, strict=False)[3] < mag
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        steps += 1
    x = np.sign(target) * 0.5 * (lo + hi)
    return (x, steps) if return_steps else x


def vertical_magnifications(cfg: OpticalConfig) -> tuple[float, float]:
    """Paraxial vertical magnifications (projector M_vp, imaging M_vi)."""
    r = cfg.vial_radius_mm
    r_px = r / cfg.projector_pixel_mm
    m_vp = 1.0 - r_px * (1.0 - 1.0 / cfg.n_resin_blue) / (cfg.throw_ratio * cfg.projector_width_px)
    m_vi = 1.0 / (1.0 - r * (1.0 - 1.0 / cfg.n_resin_red) / cfg.camera_distance_mm)
    return m_vp, m_vi


def sampling_step_at_edge(cfg: OpticalConfig, angle_step_deg: float = 2.0) -> float:
    """Arc length between camera views at the edge of the imaged region."""
    return 2 * np.pi * cfg.imaging_radius_mm * angle_step_deg / 360.0


# resampling -----------------------------------------------------------------


def _full_turn(sino: Sinogram) -> tuple[np.ndarray, np.ndarray]:
    """Rows and angles covering [a0, a0 + 360) uniformly; 180-degree data is mirrored."""
    ang = sino.angles_deg
    if sino.n_angles < 2:
        raise ValueError("resampling needs at least two angles")
    step = ang[1] - ang[0]
    if not np.allclose(np.diff(ang), step, rtol=1e-6, atol=1e-9):
        raise ValueError("resampling needs uniformly spaced angles")
    span = step * sino.n_angles
    if np.isclose(span, 360.0, atol=1e-6 * step):
        return sino.values, ang
    if np.isclose(span, 180.0, atol=1e-6 * step):
        mirrored = sino.values[:, ::-1]
        if not np.allclose(sino.detector_coords(), -sino.detector_coords()[::-1]):
            raise ValueError("mirroring 180-degree data needs a centred detector")
        return np.concatenate([sino.values, mirrored]), np.concatenate([ang, ang + 180.0])
    raise ValueError(f"angles must cover 180 or 360 degrees uniformly, got {span}")


def periodic_stencil(n_angles, angle0_deg, det_coords, angle_q, det_q):
    """Bilinear stencil on a full-turn (angle, detector) table with angular wrap.

    Returns index arrays into a table whose detector axis is zero-padded by
    one on each side, the two weights, and a validity mask (query inside the
    detector span).
    """
    step = 360.0 / n_angles
    fa = np.mod(np.asarray(angle_q, dtype=float) - angle0_deg, 360.0) / step
    a0 = np.floor(fa).astype(np.intp) % n_angles
    wa = fa - np.floor(fa)
    a1 = (a0 + 1) % n_angles
    pitch = det_coords[1] - det_coords[0]
    fd = (np.asarray(det_q, dtype=float) - det_coords[0]) / pitch
    n = len(det_coords)
    valid = np.isfinite(fd) & (fd > -1.0) & (fd < n)
    fd = np.where(valid, fd, -2.0)
    d0 = np.floor(fd).astype(np.intp)
    wd = fd - d0
    d0 = np.clip(d0 + 1, 0, n + 1)
    d1 = np.clip(d0 + 1, 0, n + 1)
    a0, a1, d0, d1, wa, wd, valid = np.broadcast_arrays(a0, a1, d0, d1, wa, wd, valid)
    return a0, a1, d0, d1, wa, wd, valid


def apply_stencil(padded, stencil):
    """Evaluate a stencil on ``padded[angle, det + 1, ...]``; trailing axes ride along."""
    a0, a1, d0, d1, wa, wd, valid = stencil
    wa = wa.reshape(wa.shape + (1,) * (padded.ndim - 2))
    wd = wd.reshape(wd.shape + (1,) * (padded.ndim - 2))
    v = (1 - wa) * ((1 - wd) * padded[a0, d0] + wd * padded[a0, d1]) + wa * (
        (1 - wd) * padded[a1, d0] + wd * padded[a1, d1]
    )
    mask = valid.reshape(valid.shape + (1,) * (padded.ndim - 2))
    return np.where(mask, v, 0.0)


def pad_detectors(table):
    widths = [(0, 0), (1, 1)] + [(0, 0)] * (table.ndim - 2)
    return np.pad(np.asarray(table, dtype=float), widths)


def sample_periodic(rows, angles_deg, det_coords, angle_q, det_q):
    """Bilinear sample of a full-turn table ``rows[angle, det]`` with angular wrap.

    ``angle_q`` and ``det_q`` broadcast together.  Samples beyond the detector
    span read as zero.
    """
    st_ = periodic_stencil(rows.shape[0], angles_deg[0], det_coords, angle_q, det_q)
    return apply_stencil(pad_detectors(rows), st_)


def projector_columns(cfg: OpticalConfig) -> np.ndarray:
    """Physical projector column centres (mm) covering the vial, centred on the axis."""
    half = int(np.ceil(physical_reach("projector", cfg) / cfg.projector_pixel_mm))
    return centered_coords(2 * half + 1, cfg.projector_pixel_mm)


def resample_projection(sino_virtual: Sinogram, cfg: OpticalConfig, columns_mm=None, frame_angles_deg=None) -> Sinogram:
    """Predistort a virtual sinogram onto physical projector columns.

    Physical sample (x_p, theta) takes the virtual value at
    (x_v(x_p), theta + delta(x_p)); columns that miss the vial stay dark.
    """
    if sino_virtual.space != "virtual":
        raise ValueError("resample_projection expects a virtual sinogram")
    rows, angles = _full_turn(sino_virtual)
    cols = projector_columns(cfg) if columns_mm is None else np.asarray(columns_mm, dtype=float)
    theta = angles if frame_angles_deg is None else np.asarray(frame_angles_deg, dtype=float)
    m = map_projector(cols, 0.0, cfg, strict=False)
    hit = np.isfinite(m.x_virtual_mm)
    xv = np.where(hit, m.x_virtual_mm, np.nan)
    delta = np.where(hit, m.delta_deg, 0.0)
    out = sample_periodic(rows, angles, sino_virtual.detector_coords(), theta[:, None] + delta[None, :], xv[None, :])
    out[:, ~hit] = 0.0
    pitch = cols[1] - cols[0] if cols.size > 1 else cfg.projector_pixel_mm
    center = -cols[0] / pitch
    return Sinogram(out, theta, pitch, center, "physical")


def camera_columns(cfg: OpticalConfig) -> np.ndarray:
    half = int(np.ceil(physical_reach("camera", cfg) / cfg.camera_pixel_mm))
    return centered_coords(2 * half + 1, cfg.camera_pixel_mm)


def virtual_camera_detectors(cfg: OpticalConfig) -> np.ndarray:
    pitch = cfg.virtual_camera_pixel_mm
    half = int(np.ceil(cfg.imaging_radius_mm / pitch))
    return centered_coords(2 * half + 1, pitch)


def _frames_full_turn(frames: ImageStack) -> ImageStack:
    if frames.angular_span() < 360.0 - 1e-6:
        raise ValueError(f"need >= 360 degrees of frames, got {frames.angular_span():.3f}")
    turn = frames.last_turn()
    wrapped = np.mod(turn.angles_deg, 360.0)
    order = np.argsort(wrapped)
    step = 360.0 / turn.n_frames
    if not np.allclose(np.diff(wrapped[order]), step, rtol=1e-6, atol=1e-6):
        raise ValueError("frames must be uniformly spaced in angle")
    return ImageStack(turn.frames[order], wrapped[order], turn.pixel_mm, turn.row_pitch_mm, turn.col_center, turn.row_center, turn.meta)


def camera_resampling_plan(frames: ImageStack, cfg: OpticalConfig, det_coords=None, radon_angles_deg=None):
    """Precomputed (angle, column) lookups shared by every row of a frame stack."""
    full = _frames_full_turn(frames)
    s = virtual_camera_detectors(cfg) if det_coords is None else np.asarray(det_coords, dtype=float)
    step = 360.0 / full.n_frames
    phi = np.arange(full.n_frames) * step if radon_angles_deg is None else np.asarray(radon_angles_deg, dtype=float)
    reach = virtual_reach("camera", cfg)
    inside = np.abs(s) <= reach
    x_c = np.full(s.shape, np.nan)
    x_c[inside] = invert_detector_map(s[inside], "camera", cfg)
    delta = np.full(s.shape, np.nan)
    delta[inside] = map_camera(x_c[inside], 0.0, cfg).delta_deg
    stage = phi[:, None] - np.nan_to_num(delta)[None, :] - CAMERA_VIEW_OFFSET_DEG
    return full, s, phi, stage, x_c


def resample_images_to_radon(frames: ImageStack, slice_row: int, cfg: OpticalConfig, plan=None) -> Sinogram:
    """Undistorted (virtual, Radon-space) sinogram of one frame row.

    Virtual node (s, phi): x_c = inverse camera map of s, stage angle
    phi - delta(x_c) - view offset, bilinear in (stage angle, column).
    """
    full, s, phi, stage, x_c = plan if plan is not None else camera_resampling_plan(frames, cfg)
    if not 0 <= slice_row < full.n_rows:
        raise ValueError(f"slice_row {slice_row} outside 0..{full.n_rows - 1}")
    rows = np.asarray(full.frames[:, slice_row, :], dtype=float)
    vals = sample_periodic(rows, full.angles_deg, full.col_coords(), stage, x_c[None, :])
    vals = np.where(np.isfinite(x_c)[None, :], vals, 0.0)
    return Sinogram(vals, phi, s[1] - s[0], -s[0] / (s[1] - s[0]), "virtual")
