"""Measurements on printed (simulated) parts: circle fits, I_p calibration, SDF statistics, line profiles."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree
from skimage.measure import find_contours

from .mesh import TriMesh, voxelize


def fit_circle(points) -> tuple[np.ndarray, float]:
    """Algebraic least-squares circle through 2D points.

    Minimizes ``sum((|p - c|^2 - r^2)^2)`` by solving the linear system in
    ``(2c, r^2 - |c|^2)``.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(p) < 3:
        raise ValueError("circle fit needs at least 3 points")
    q = p - p.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum(q * q, axis=1)))
    if not scale > 0:
        raise ValueError("points are coincident")
    q = q / scale
    a = np.column_stack([2 * q, np.ones(len(q))])
    b = np.sum(q * q, axis=1)
    sol, _, rank, sv = np.linalg.lstsq(a, b, rcond=None)
    if rank < 3 or sv[-1] < 1e-10 * sv[0]:
        raise ValueError("points are collinear")
    c = sol[:2]
    r2 = sol[2] + c @ c
    return c * scale + p.mean(axis=0), float(np.sqrt(r2) * scale)


# I_p calibration -----------------------------------------------------------------


@dataclass
class IpCalibration:
    ip_value: float
    fit_circle_center_mm: np.ndarray
    fit_circle_diameter_mm: float
    boundary_intensity_samples: np.ndarray

    def to_dict(self) -> dict:
        return {"ip_value": self.ip_value, "fit_circle_center_mm": list(map(float, self.fit_circle_center_mm)),
                "fit_circle_diameter_mm": self.fit_circle_diameter_mm,
                "n_samples": int(len(self.boundary_intensity_samples))}


def gel_boundary(dose_slice, d_gel, x, y) -> np.ndarray:
    """Sub-voxel (x, y) points where an in-plane dose slice crosses ``d_gel``."""
    contours = find_contours(np.asarray(dose_slice, dtype=float), d_gel)
    if not contours:
        raise ValueError("no gelled voxels in the calibration slice")
    pts = np.concatenate(contours)
    h = x[1] - x[0]
    return np.column_stack([x[0] + pts[:, 1] * h, y[0] + pts[:, 0] * (y[1] - y[0])])


def _sample_plane(img, grid, pts):
    ix = (pts[:, 0] - grid.origin_mm[0]) / grid.spacing_mm[0]
    iy = (pts[:, 1] - grid.origin_mm[1]) / grid.spacing_mm[1]
    return map_coordinates(np.asarray(img, dtype=float), [iy, ix], order=1, mode="nearest")


def calibrate_ip(session, recon, n_samples: int = 720) -> IpCalibration:
    """I_p from a cylinder print: mean OST intensity on the true gel boundary circle.

    The circle is fitted to the gel boundary of the mid-height slice of the
    final truth dose (standing in for profilometry) and sampled on the
    overhead mean projection of the reconstruction over the gelled height.
    """
    dose = session.dose_snapshots[-1]
    gel = np.asarray(dose.values) >= session.d_gel
    if not gel.any():
        raise ValueError("nothing gelled in this session")
    rows = np.flatnonzero(gel.any(axis=(1, 2)))
    mid = rows[len(rows) // 2]
    pts = gel_boundary(dose.values[mid], session.d_gel, dose.axis_coords("x"), dose.axis_coords("y"))
    center, radius = fit_circle(pts)
    z_lo, z_hi = dose.axis_coords("z")[rows[[0, -1]]]
    g = recon.grid
    zc = g.axis_coords("z")
    pad = g.spacing_mm[2]
    keep = (zc >= z_lo + pad) & (zc <= z_hi - pad)
    if not keep.any():
        raise ValueError("gelled height is too small to calibrate")
    mean_proj = np.asarray(g.values, dtype=float)[keep].mean(axis=0)
    t = 2 * np.pi * np.arange(n_samples) / n_samples
    circle = center + radius * np.column_stack([np.cos(t), np.sin(t)])
    samples = _sample_plane(mean_proj, g, circle)
    return IpCalibration(float(samples.mean()), center, 2 * radius, samples)


# signed distance comparison ------------------------------------------------------


def closest_points_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p; all (N, 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    out = a + v_in[:, None] * ab + w_in[:, None] * ac
    # regions checked from the most general to the most specific
    conds = [
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + t_bc[:, None] * (c - b)),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t_ac[:, None] * ac),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t_ab[:, None] * ab),
        ((d6 >= 0) & (d5 <= d6), c),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d1 <= 0) & (d2 <= 0), a),
    ]
    for mask, val in conds:
        out = np.where(mask[:, None], val, out)
    return out


def unsigned_distance(points, mesh: TriMesh, chunk: int = 200_000) -> np.ndarray:
    """Exact distance from each point to the nearest point of the mesh surface."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.triangles
    cen = tri.mean(axis=1)
    reach = np.linalg.norm(tri - cen[:, None, :], axis=2).max()
    tree = cKDTree(cen)
    k = min(4, len(tri))
    _, near = tree.query(pts, k=k)
    near = near.reshape(len(pts), k)
    best = np.full(len(pts), np.inf)
    for j in range(k):
        t = tri[near[:, j]]
        q = closest_points_on_triangles(pts, t[:, 0], t[:, 1], t[:, 2])
        best = np.minimum(best, np.linalg.norm(q - pts, axis=1))
    # any closer triangle has its centroid within best + reach
    cand = tree.query_ball_point(pts, best + reach + 1e-12)
    counts = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(pts))
    flat_tri = np.fromiter((i for c in cand for i in c), dtype=np.int64, count=int(counts.sum()))
    flat_pt = np.repeat(np.arange(len(pts)), counts)
    for s in range(0, len(flat_pt), chunk):
        ip, it = flat_pt[s:s + chunk], flat_tri[s:s + chunk]
        t = tri[it]
        q = closest_points_on_triangles(pts[ip], t[:, 0], t[:, 1], t[:, 2])
        np.minimum.at(best, ip, np.linalg.norm(q - pts[ip], axis=1))
    return best


def inside_field(mesh: TriMesh, points, resolution: float) -> np.ndarray:
    """Inside test by trilinear lookup in an occupancy grid of the given pitch."""
    lo, hi = mesh.bounds()
    lo = lo - 2 * resolution
    hi = hi + 2 * resolution
    axes = [np.arange(l, h + resolution, resolution) for l, h in zip(lo, hi)]
    occ = voxelize(mesh, *axes).astype(float)  # [z, y, x]
    p = np.asarray(points, dtype=float)
    idx = [(p[:, i] - axes[i][0]) / resolution for i in (2, 1, 0)]
    return map_coordinates(occ, idx, order=1, mode="constant", cval=0.0) >= 0.5


@dataclass
class SdfReport:
    distances_mm: np.ndarray
    rmse_mm: float
    rmse_pct_of_max_dim: float
    std_mm: float
    mean_mm: float
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray
    max_dimension_mm: float
    vertices: np.ndarray = field(repr=False, default=None)

    def summary(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("rmse_mm", "rmse_pct_of_max_dim", "std_mm", "mean_mm", "max_dimension_mm")} | {
            "n_vertices": int(len(self.distances_mm))}

    def write(self, out_dir) -> None:
        from .fileio import atomic_write_text

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "sdf_summary.json", json.dumps(self.summary(), indent=2, sort_keys=True))
        rows = ["x_mm,y_mm,z_mm,sdf_mm"]
        v = self.vertices if self.vertices is not None else np.full((len(self.distances_mm), 3), np.nan)
        rows += [f"{a:.6f},{b:.6f},{c:.6f},{d:.6f}" for (a, b, c), d in zip(v, self.distances_mm)]
        atomic_write_text(out / "sdf_vertices.csv", "\n".join(rows) + "\n")
        hist = ["bin_lo_mm,bin_hi_mm,count"]
        e = self.histogram_edges
        hist += [f"{e[i]:.6f},{e[i + 1]:.6f},{int(c)}" for i, c in enumerate(self.histogram_counts)]
        atomic_write_text(out / "sdf_histogram.csv", "\n".join(hist) + "\n")


def sdf_compare(mesh_test: TriMesh, mesh_ref: TriMesh, grid_resolution: float = 0.155, bins: int = 50) -> SdfReport:
    """Signed distance from every test vertex to the reference surface.

    Distances are point-to-triangle exact; the sign is negative where the
    vertex lies inside the reference, read from an occupancy grid of pitch
    ``grid_resolution``.
    """
    if mesh_test.is_empty() or mesh_ref.is_empty():
        raise ValueError("sdf_compare needs two non-empty meshes")
    v = mesh_test.vertices
    d = unsigned_distance(v, mesh_ref)
    inside = inside_field(mesh_ref, v, grid_resolution)
    sdf = np.where(inside, -d, d)
    rmse = float(np.sqrt(np.mean(sdf**2)))
    dim = mesh_ref.max_dimension()
    lo, hi = float(sdf.min()), float(sdf.max())
    if hi - lo < 1e-9:  # near-constant distances still get finite bins
        lo, hi = lo - 1e-6, hi + 1e-6
    counts, edges = np.histogram(sdf, bins=bins, range=(lo, hi))
    return SdfReport(sdf, rmse, 100.0 * rmse / dim, float(np.std(sdf)), float(np.mean(sdf)), edges, counts, dim, v)


# line profiles ---------------------------------------------------------------------


def line_profile(vol, p0, p1, n_samples: int = 100) -> np.ndarray:
    """Trilinear samples of a volume along the segment p0 -> p1 (xyz, mm)."""
    grid = vol.grid if hasattr(vol, "grid") else vol
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    t = np.linspace(0.0, 1.0, n_samples)
    pts = p0 + t[:, None] * (p1 - p0)
    idx = grid.world_to_index(pts)
    hi = np.array(grid.dims) - 1
    if np.any(idx < -1e-9) or np.any(idx > hi + 1e-9):
        raise ValueError("profile segment leaves the volume")
    coords = [idx[:, 2], idx[:, 1], idx[:, 0]]
    return map_coordinates(np.asarray(grid.values, dtype=float), coords, order=1, mode="nearest")


def peak_dip_contrast(profile) -> float:
    """(mean of the two highest local maxima - lowest value between them) / mean peak."""
    p = np.asarray(profile, dtype=float)
    interior = np.flatnonzero((p[1:-1] >= p[:-2]) & (p[1:-1] > p[2:])) + 1
    if len(interior) < 2:
        return 0.0
    top = np.sort(interior[np.argsort(p[interior])[-2:]])
    peak = p[top].mean()
    dip = p[top[0]:top[1] + 1].min()
    return float((peak - dip) / peak) if peak > 0 else 0.0
