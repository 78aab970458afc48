"""File formats: STL meshes, VGRD volumes, 16-bit PGM frames and JSON manifests.

All writers go through a temporary file in the target directory followed by
an atomic rename.
"""
from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np

from .grids import ImageStack, VoxelGrid
from .mesh import TriMesh


class FormatError(ValueError):
    """Malformed input file; ``offset`` is the byte position of the problem when known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


def _umask() -> int:
    old = os.umask(0)
    os.umask(old)
    return old


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


# STL ---------------------------------------------------------------------------

_STL_RECORD = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])


def _parse_binary_stl(data: bytes) -> np.ndarray:
    if len(data) < 84:
        raise FormatError("binary STL shorter than its 84-byte header", len(data))
    (count,) = struct.unpack_from("<I", data, 80)
    need = 84 + 50 * count
    if len(data) < need:
        full = (len(data) - 84) // 50
        raise FormatError(f"truncated STL: header declares {count} triangles but only {full} are complete",
                          84 + 50 * full)
    if len(data) > need:
        raise FormatError(f"STL has {len(data) - need} trailing bytes after {count} triangles", need)
    rec = np.frombuffer(data, dtype=_STL_RECORD, count=count, offset=84)
    return rec["v"].astype(float)


_FLOAT = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_VERTEX = re.compile(rf"vertex\s+({_FLOAT})\s+({_FLOAT})\s+({_FLOAT})")


def _parse_ascii_stl(text: str) -> np.ndarray:
    if not re.match(r"\s*solid\b", text):
        raise FormatError("ASCII STL must start with 'solid'", 0)
    if not re.search(r"endsolid", text):
        raise FormatError("ASCII STL is missing 'endsolid'", len(text))
    facets = text.count("facet normal")
    verts = _VERTEX.findall(text)
    if len(verts) != 3 * facets:
        raise FormatError(f"ASCII STL has {facets} facets but {len(verts)} vertices")
    return np.array(verts, dtype=float).reshape(-1, 3, 3)


def read_stl(path) -> TriMesh:
    """Binary or ASCII STL; vertices closer than 1e-6 mm are merged."""
    data = Path(path).read_bytes()
    is_ascii = data[:5].lower() == b"solid" and b"facet" in data[:1024]
    binary_size_ok = len(data) >= 84 and len(data) == 84 + 50 * struct.unpack_from("<I", data, 80)[0]
    if is_ascii and not binary_size_ok:
        try:
            tri = _parse_ascii_stl(data.decode("ascii"))
        except UnicodeDecodeError as exc:
            raise FormatError("ASCII STL contains non-ASCII bytes", exc.start) from None
    else:
        tri = _parse_binary_stl(data)
    if not np.all(np.isfinite(tri)):
        raise FormatError("STL contains non-finite coordinates")
    return TriMesh.from_triangles(tri)


def stl_bytes(mesh: TriMesh, header: bytes = b"ostvam") -> bytes:
    tri = mesh.triangles
    rec = np.zeros(len(tri), dtype=_STL_RECORD)
    rec["v"] = tri
    rec["normal"] = mesh.face_normals() if len(tri) else np.zeros((0, 3))
    return header[:80].ljust(80, b"\0") + struct.pack("<I", len(tri)) + rec.tobytes()


def write_stl(path, mesh: TriMesh, ascii: bool = False) -> None:
    if not ascii:
        atomic_write_bytes(path, stl_bytes(mesh))
        return
    lines = ["solid ostvam"]
    for n, t in zip(mesh.face_normals().astype(np.float32), mesh.triangles.astype(np.float32)):
        lines.append("facet normal {} {} {}".format(*map(repr, map(float, n))))
        lines.append("outer loop")
        lines += ["vertex {} {} {}".format(*map(repr, map(float, v))) for v in t]
        lines += ["endloop", "endfacet"]
    lines.append("endsolid ostvam")
    atomic_write_text(path, "\n".join(lines) + "\n")


# VGRD volumes -------------------------------------------------------------------

VGRD_MAGIC = b"VGRD"
VGRD_VERSION = 1
_VGRD_HEADER = struct.Struct("<4sH3I3d3d")


def volume_bytes(grid: VoxelGrid) -> bytes:
    nx, ny, nz = grid.dims
    if max(nx, ny, nz) > 0xFFFFFFFF:
        raise ValueError("volume dimensions overflow u32")
    header = _VGRD_HEADER.pack(VGRD_MAGIC, VGRD_VERSION, nx, ny, nz, *grid.spacing_mm, *grid.origin_mm)
    return header + np.ascontiguousarray(grid.values, dtype="<f4").tobytes()


def parse_volume(data: bytes) -> VoxelGrid:
    if len(data) < _VGRD_HEADER.size:
        raise FormatError("volume file shorter than its header", len(data))
    magic, version, nx, ny, nz, *rest = _VGRD_HEADER.unpack_from(data)
    if magic != VGRD_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VGRD_VERSION:
        raise FormatError(f"unsupported volume version {version}", 4)
    need = _VGRD_HEADER.size + 4 * nx * ny * nz
    if len(data) != need:
        raise FormatError(f"payload size mismatch: expected {need} bytes, found {len(data)}", min(len(data), need))
    values = np.frombuffer(data, dtype="<f4", offset=_VGRD_HEADER.size).reshape(nz, ny, nx).copy()
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("volume payload contains non-finite values", _VGRD_HEADER.size + 4 * int(bad[0]))
    try:
        return VoxelGrid(values, tuple(rest[:3]), tuple(rest[3:]))
    except ValueError as exc:
        raise FormatError(f"invalid volume header: {exc}", 18) from None


def write_volume(path, grid: VoxelGrid) -> None:
    atomic_write_bytes(path, volume_bytes(grid))


def read_volume(path) -> VoxelGrid:
    return parse_volume(Path(path).read_bytes())


# PGM images -----------------------------------------------------------------------


def pgm_bytes(img: np.ndarray) -> bytes:
    a = np.asarray(img)
    if a.ndim != 2 or a.dtype != np.uint16:
        raise ValueError("PGM writer expects a 2D uint16 image")
    h, w = a.shape
    return f"P5\n{w} {h}\n65535\n".encode() + a.astype(">u2").tobytes()


def write_pgm(path, img) -> None:
    atomic_write_bytes(path, pgm_bytes(img))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if not m:
            raise FormatError("incomplete PGM header", pos)
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError("not a binary PGM (P5)", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace byte
    bpp = 2 if maxval > 255 else 1
    need = pos + w * h * bpp
    if len(data) < need:
        raise FormatError("truncated PGM payload", len(data))
    dt = ">u2" if bpp == 2 else "u1"
    return np.frombuffer(data, dtype=dt, count=w * h, offset=pos).reshape(h, w).astype(np.uint16)


def to_uint16(img, vmax: float | None = None) -> tuple[np.ndarray, float]:
    """Scale non-negative values to 0..65535; returns the image and the value of 65535."""
    a = np.asarray(img, dtype=float)
    top = float(a.max()) if vmax is None else float(vmax)
    if not top > 0:
        return np.zeros(a.shape, np.uint16), 1.0
    return np.rint(np.clip(a, 0, top) / top * 65535).astype(np.uint16), top


# frame directories ---------------------------------------------------------------


def write_frames(directory, stack: ImageStack, config_hash: str | None = None) -> None:
    """16-bit PGM per frame plus ``manifest.json``; one global intensity scale."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _, top = to_uint16(stack.frames)
    names = []
    for i, f in enumerate(stack.frames):
        name = f"frame_{i:05d}.pgm"
        write_pgm(d / name, to_uint16(f, top)[0])
        names.append(name)
    manifest = {
        "count": stack.n_frames,
        "angles_deg": [float(a) for a in stack.angles_deg],
        "width": stack.n_cols,
        "height": stack.n_rows,
        "pixel_mm": stack.pixel_mm,
        "row_pitch_mm": stack.row_pitch_mm,
        "bit_depth": 16,
        "full_scale": top,
        "files": names,
        "config_hash": config_hash or stack.meta.get("config_hash"),
        "meta": {k: v for k, v in stack.meta.items() if k != "config_hash" and _jsonable(v)},
    }
    write_json(d / "manifest.json", manifest)


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def read_frames(directory) -> ImageStack:
    d = Path(directory)
    m = read_json(d / "manifest.json")
    angles = np.asarray(m["angles_deg"], dtype=float)
    if len(angles) != m["count"] or len(m["files"]) != m["count"]:
        raise FormatError("manifest frame count does not match its lists")
    if np.any(np.diff(angles) <= 0):
        raise FormatError("manifest angles must be strictly increasing")
    missing = [f for f in m["files"] if not (d / f).exists()]
    if missing:
        raise FormatError(f"{len(missing)} frame files missing, first {missing[0]}")
    scale = m["full_scale"] / 65535.0
    frames = np.stack([read_pgm(d / f) for f in m["files"]]).astype(np.float32) * np.float32(scale)
    meta = dict(m.get("meta", {}))
    meta["config_hash"] = m.get("config_hash")
    return ImageStack(frames, angles, m["pixel_mm"], m["row_pitch_mm"], meta=meta)


def write_volume_with_manifest(path, grid: VoxelGrid, **info) -> None:
    write_volume(path, grid)
    write_json(Path(str(path) + ".json"), info)


def read_volume_manifest(path) -> dict:
    p = Path(str(path) + ".json")
    return read_json(p) if p.exists() else {}


class ConfigMismatchError(RuntimeError):
    pass


def check_config_hash(found: str | None, expected: str, what: str, force: bool = False) -> None:
    """Refuse inputs made with another configuration unless ``force``."""
    if found is not None and found != expected and not force:
        raise ConfigMismatchError(f"{what} was produced with config {found}, current config is {expected}; "
                                  "use --force to override")
