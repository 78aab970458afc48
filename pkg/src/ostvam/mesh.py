"""Triangle meshes, simple primitives, and implicit test geometries."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from skimage.measure import marching_cubes


class OpenMeshWarning(UserWarning):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @classmethod
    def from_triangles(cls, triangles, tol: float = 1e-6) -> "TriMesh":
        """Build from a triangle soup (F, 3, 3), merging vertices closer than ``tol``."""
        tri = np.asarray(triangles, dtype=float).reshape(-1, 3, 3)
        if tri.shape[0] == 0:
            return cls.empty()
        pts = tri.reshape(-1, 3)
        key = np.round(pts / tol).astype(np.int64)
        _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        return cls(pts[first], inverse.reshape(-1, 3))

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return self.n_faces == 0

    def edges(self) -> np.ndarray:
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    def is_watertight(self) -> bool:
        """Every edge is used exactly twice, once in each direction."""
        if self.is_empty():
            return False
        e = self.edges()
        directed, counts = np.unique(e, axis=0, return_counts=True)
        if np.any(counts != 1):
            return False
        undirected, ucounts = np.unique(np.sort(e, axis=1), axis=0, return_counts=True)
        return bool(np.all(ucounts == 2))

    def volume(self) -> float:
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def bounds(self) -> np.ndarray:
        return np.stack([self.vertices.min(0), self.vertices.max(0)])

    def max_dimension(self) -> float:
        return float(np.ptp(self.vertices, axis=0).max())

    def area(self) -> float:
        t = self.triangles
        return float(0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1).sum())

    def transformed(self, scale=1.0, offset=(0.0, 0.0, 0.0)) -> "TriMesh":
        return TriMesh(self.vertices * np.asarray(scale, dtype=float) + np.asarray(offset, dtype=float), self.faces.copy())

    def flipped(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces[:, ::-1].copy())

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def same_as(self, other: "TriMesh", tol: float = 1e-9) -> bool:
        """Geometric identity up to vertex/face ordering (face winding preserved)."""
        if self.n_faces != other.n_faces:
            return False
        return np.array_equal(_canonical_faces(self, tol), _canonical_faces(other, tol))


def _canonical_faces(mesh: TriMesh, tol: float) -> np.ndarray:
    tri = np.round(mesh.triangles / tol).astype(np.int64)
    flat = tri.reshape(-1, 3)
    rank = np.empty(len(flat), dtype=np.int64)
    rank[np.lexsort(flat.T[::-1])] = np.arange(len(flat))
    # rotate each triangle so its lexicographically smallest vertex leads
    first = rank.reshape(-1, 3).argmin(axis=1)
    idx = (first[:, None] + np.arange(3)) % 3
    rolled = np.take_along_axis(tri, idx[:, :, None], axis=1).reshape(-1, 9)
    return rolled[np.lexsort(rolled.T[::-1])]


# primitives ------------------------------------------------------------------


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned box as 12 outward-facing triangles."""
    v = (np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
         * np.asarray(size, dtype=float) + np.asarray(center, dtype=float))
    f = np.array([
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ])
    return TriMesh(v, f)


def cylinder(radius: float, height: float, segments: int = 128, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Closed z-aligned cylinder (polygonal, vertices on the true circle)."""
    a = 2 * np.pi * np.arange(segments) / segments
    ring = np.column_stack([radius * np.cos(a), radius * np.sin(a)])
    zb, zt = -height / 2, height / 2
    v = np.vstack([
        np.column_stack([ring, np.full(segments, zb)]),
        np.column_stack([ring, np.full(segments, zt)]),
        [[0, 0, zb], [0, 0, zt]],
    ]) + np.asarray(center, dtype=float)
    i = np.arange(segments)
    j = (i + 1) % segments
    cb, ct = 2 * segments, 2 * segments + 1
    side = np.vstack([np.column_stack([i, j, j + segments]), np.column_stack([i, j + segments, i + segments])])
    bottom = np.column_stack([np.full(segments, cb), j, i])
    top = np.column_stack([np.full(segments, ct), i + segments, j + segments])
    return TriMesh(v, np.vstack([side, bottom, top]))


def uv_sphere(radius: float, n_lat: int = 48, n_lon: int = 96, center=(0.0, 0.0, 0.0)) -> TriMesh:
    lat = np.pi * np.arange(1, n_lat) / n_lat
    lon = 2 * np.pi * np.arange(n_lon) / n_lon
    ring = np.stack(np.meshgrid(lat, lon, indexing="ij"), -1).reshape(-1, 2)
    v = np.column_stack([np.sin(ring[:, 0]) * np.cos(ring[:, 1]), np.sin(ring[:, 0]) * np.sin(ring[:, 1]), np.cos(ring[:, 0])])
    v = np.vstack([v, [[0, 0, 1], [0, 0, -1]]]) * radius + np.asarray(center, dtype=float)
    north, south = len(v) - 2, len(v) - 1
    faces = []
    idx = lambda a, b: a * n_lon + (b % n_lon)
    for b in range(n_lon):
        faces.append([north, idx(0, b), idx(0, b + 1)])
        faces.append([south, idx(n_lat - 2, b + 1), idx(n_lat - 2, b)])
        for a in range(n_lat - 2):
            faces.append([idx(a, b), idx(a + 1, b), idx(a + 1, b + 1)])
            faces.append([idx(a, b), idx(a + 1, b + 1), idx(a, b + 1)])
    return TriMesh(v, np.array(faces))


# implicit geometry -----------------------------------------------------------


def mesh_from_field(field, spacing, origin, level: float = 0.0) -> TriMesh:
    """Closed level-set surface of ``field[z, y, x]`` (inside where field > level).

    The field is padded with an outside value so that surfaces touching the
    box are capped.  Faces are wound outward.
    """
    f = np.asarray(field, dtype=float)
    if not f.max() > level:
        return TriMesh.empty()
    low = min(f.min(), level) - 1.0
    f = np.pad(f, 1, constant_values=low)
    sz, sy, sx = spacing[2], spacing[1], spacing[0]
    verts, faces, _, _ = marching_cubes(f, level=level, spacing=(sz, sy, sx), allow_degenerate=False)
    xyz = verts[:, ::-1] - np.array([sx, sy, sz]) + np.asarray(origin, dtype=float)
    mesh = TriMesh(xyz, faces)
    if mesh.volume() < 0:
        mesh = mesh.flipped()
    return mesh


def implicit_mesh(fn, bounds, resolution: float) -> TriMesh:
    """Mesh ``fn(x, y, z) > 0`` sampled on a grid of pitch ``resolution`` over ``bounds`` ((3,2))."""
    b = np.asarray(bounds, dtype=float)
    axes = [np.arange(lo, hi + resolution / 2, resolution) for lo, hi in b]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    values = fn(xx, yy, zz)
    return mesh_from_field(values, (resolution,) * 3, (axes[0][0], axes[1][0], axes[2][0]))


def _smooth_union(a, b, k):
    # polynomial smooth max for inside-positive fields
    h = np.clip(0.5 + 0.5 * (a - b) / k, 0.0, 1.0)
    return a * h + b * (1 - h) + k * h * (1 - h)


def _ellipsoid(x, y, z, c, r):
    q = np.sqrt(((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2)
    return (1.0 - q) * min(r)


def cylinder_field(radius=6.0, height=10.0):
    def fn(x, y, z):
        return np.minimum(radius - np.hypot(x, y), height / 2 - np.abs(z))

    return fn


def gyroid_field(radius=7.0, height=10.0, cell=7.0, sheet=1.0):
    """Gyroid sheet of roughly constant thickness clipped to a cylinder."""
    k = 2 * np.pi / cell

    def fn(x, y, z):
        sx, cx = np.sin(k * x), np.cos(k * x)
        sy, cy = np.sin(k * y), np.cos(k * y)
        sz, cz = np.sin(k * z), np.cos(k * z)
        g = sx * cy + sy * cz + sz * cx
        gx = k * (cx * cy - sz * sx)
        gy = k * (-sx * sy + cy * cz)
        gz = k * (-sy * sz + cz * cx)
        dist = np.abs(g) / np.maximum(np.sqrt(gx * gx + gy * gy + gz * gz), 1e-6)
        shell = sheet / 2 - dist
        return np.minimum(shell, np.minimum(radius - np.hypot(x, y), height / 2 - np.abs(z)))

    return fn


def bunny_field(scale=1.0):
    """Blobby rabbit: body, head, two ears and a tail blended together (about 12 mm)."""
    parts = [
        ((0.0, -1.0, -1.5), (4.2, 5.2, 3.5)),
        ((0.0, 3.6, 1.0), (2.6, 2.6, 2.4)),
        ((-1.2, 4.0, 4.2), (0.8, 0.9, 2.6)),
        ((1.3, 3.3, 4.0), (0.8, 0.9, 2.4)),
        ((0.0, -6.0, -2.0), (1.2, 1.2, 1.2)),
    ]

    def fn(x, y, z):
        x, y, z = x / scale, y / scale, z / scale
        acc = None
        for c, r in parts:
            e = _ellipsoid(x, y, z, c, r)
            acc = e if acc is None else _smooth_union(acc, e, 0.6)
        return np.minimum(acc, z + 4.5) * scale

    return fn


def benchy_field(scale=1.0):
    """Boat-like test part: a solid rounded hull, a thin-walled open cabin and a chimney."""

    def fn(x, y, z):
        x, y, z = x / scale, y / scale, z / scale
        # hull: ellipse in plan, tapering toward the keel
        depth = np.clip((z + 3.5) / 3.5, 0.0, 1.0)
        hull = 1.0 - np.sqrt((x / (3.6 * (0.55 + 0.45 * depth))) ** 2 + (y / 6.5) ** 2)
        hull = np.minimum(hull * 3.0, np.minimum(z + 3.5, -z))
        # cabin: square tube with 0.6 mm walls on the deck
        cx, cy = np.abs(x), np.abs(y + 0.8)
        outer = np.minimum(2.2 - cx, 2.0 - cy)
        inner = np.minimum(1.6 - cx, 1.4 - cy)
        cabin = np.minimum(np.minimum(outer, -inner), np.minimum(z + 0.2, 3.4 - z))
        roof = np.minimum(outer, np.minimum(z - 2.8, 3.4 - z))
        chimney = np.minimum(0.6 - np.hypot(x, y - 3.0), np.minimum(z + 0.2, 2.6 - z))
        return np.maximum.reduce([hull, cabin, roof, chimney]) * scale

    return fn


def sample_field(fn, grid) -> np.ndarray:
    """Evaluate an implicit shape on a VoxelGrid's voxel centres."""
    x, y, z = (grid.axis_coords(a) for a in "xyz")
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
    return fn(xx, yy, zz)


SHAPES = {
    "cylinder": (cylinder_field, ((-6.5, 6.5), (-6.5, 6.5), (-5.5, 5.5))),
    "gyroid": (gyroid_field, ((-7.5, 7.5), (-7.5, 7.5), (-5.5, 5.5))),
    "bunny": (bunny_field, ((-5.5, 5.5), (-7.8, 5.8), (-5.0, 7.2))),
    "benchy": (benchy_field, ((-4.2, 4.2), (-7.0, 7.0), (-4.0, 3.9))),
}


def shape_mesh(name: str, resolution: float = 0.1, **kwargs) -> TriMesh:
    """Mesh of one of the built-in test parts."""
    if name not in SHAPES:
        raise ValueError(f"unknown shape {name!r}; choose from {sorted(SHAPES)}")
    factory, bounds = SHAPES[name]
    return implicit_mesh(factory(**kwargs), bounds, resolution)


# rasterization ---------------------------------------------------------------

_JITTER = (np.sqrt(2) - 1.0) * 1e-6, (np.sqrt(3) - 1.0) * 1e-6


def _parity_crossings(tri, cols_a, cols_b, cols_c):
    """Crossing counts below each voxel centre for rays along the third axis.

    ``tri`` is (F, 3, 3) already permuted so the ray axis is last.
    Returns (counts[nc, nb, na] cumulative crossings, total per column).
    """
    na, nb, nc = len(cols_a), len(cols_b), len(cols_c)
    da, db, dc = cols_a[1] - cols_a[0] if na > 1 else 1.0, cols_b[1] - cols_b[0] if nb > 1 else 1.0, cols_c[1] - cols_c[0] if nc > 1 else 1.0
    # ray positions get a tiny irrational offset so they never hit edges exactly
    ja, jb = _JITTER[0] * da, _JITTER[1] * db
    p = tri[:, :, :2] - np.array([cols_a[0] + ja, cols_b[0] + jb])
    lo = np.ceil(p.min(1) / [da, db]).astype(np.int64)
    hi = np.floor(p.max(1) / [da, db]).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [na - 1, nb - 1])
    wa = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    wb = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = np.zeros((nc + 1, nb, na), dtype=np.int32)
    totals = np.zeros((nb, na), dtype=np.int32)
    n_pairs = wa * wb
    keep = n_pairs > 0
    if not np.any(keep):
        return counts[:-1], totals
    tri, p, lo, wa, wb, n_pairs = tri[keep], p[keep], lo[keep], wa[keep], wb[keep], n_pairs[keep]
    # process in chunks to bound memory
    offsets = np.concatenate([[0], np.cumsum(n_pairs)])
    chunk = 2_000_000
    start = 0
    while start < len(tri):
        stop = np.searchsorted(offsets, offsets[start] + chunk, side="right") - 1
        stop = max(stop, start + 1)
        sl = slice(start, stop)
        npair = n_pairs[sl]
        t_idx = np.repeat(np.arange(start, stop), npair)
        local = np.arange(npair.sum()) - np.repeat(offsets[start:stop] - offsets[start], npair)
        ia = lo[t_idx, 0] + local % wa[t_idx]
        ib = lo[t_idx, 1] + local // wa[t_idx]
        qa = ia * da
        qb = ib * db
        v0, v1, v2 = p[t_idx, 0], p[t_idx, 1], p[t_idx, 2]
        e1 = v1 - v0
        e2 = v2 - v0
        den = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        ra = qa - v0[:, 0]
        rb = qb - v0[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = (ra * e2[:, 1] - rb * e2[:, 0]) / den
            w = (e1[:, 0] * rb - e1[:, 1] * ra) / den
            hit = (den != 0) & (u >= 0) & (w >= 0) & (u + w <= 1)
        tz = tri[t_idx[hit]][:, :, 2]
        zh = tz[:, 0] + u[hit] * (tz[:, 1] - tz[:, 0]) + w[hit] * (tz[:, 2] - tz[:, 0])
        kz = np.clip(np.ceil((zh - cols_c[0]) / dc), 0, nc).astype(np.int64)
        np.add.at(counts, (kz, ib[hit], ia[hit]), 1)
        np.add.at(totals, (ib[hit], ia[hit]), 1)
        start = stop
    return np.cumsum(counts, axis=0)[:-1], totals


def voxelize(mesh: TriMesh, x, y, z) -> np.ndarray:
    """Inside mask ``[z, y, x]`` of voxel centres by ray parity along z.

    Columns with an odd number of crossings (open or defective meshes) are
    resolved by a majority vote over rays along x, y and z, with a warning.
    """
    x, y, z = (np.asarray(a, dtype=float) for a in (x, y, z))
    tri = mesh.triangles
    if len(tri) == 0:
        return np.zeros((len(z), len(y), len(x)), dtype=bool)
    cz, tz = _parity_crossings(tri, x, y, z)
    inside_z = (cz % 2).astype(bool)
    bad = (tz % 2) == 1
    if not np.any(bad):
        return inside_z
    warnings.warn(f"{int(bad.sum())} ray columns had odd parity; using a 3-axis majority vote", OpenMeshWarning)
    cx, _ = _parity_crossings(tri[:, :, [1, 2, 0]], y, z, x)  # counts[x, z, y]
    cy, _ = _parity_crossings(tri[:, :, [2, 0, 1]], z, x, y)  # counts[y, x, z]
    inside_x = (cx % 2).astype(bool).transpose(1, 2, 0)
    inside_y = (cy % 2).astype(bool).transpose(2, 0, 1)
    return (inside_x.astype(int) + inside_y + inside_z) >= 2
