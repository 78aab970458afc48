import os
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from ostvam.fileio import (
    ConfigMismatchError, FormatError, atomic_write_bytes, check_config_hash, parse_volume, pgm_bytes, read_frames,
    read_pgm, read_stl, read_volume, read_volume_manifest, stl_bytes, volume_bytes, write_frames, write_pgm,
    write_stl, write_volume, write_volume_with_manifest,
)
from ostvam.grids import ImageStack, VoxelGrid
from ostvam.mesh import box, uv_sphere


def test_binary_cube(tmp_path):
    p = tmp_path / "cube.stl"
    write_stl(p, box())
    assert p.stat().st_size == 84 + 12 * 50
    m = read_stl(p)
    assert len(m.vertices) == 8 and len(m.faces) == 12 and m.is_watertight()
    assert m.same_as(box())


def test_ascii_cube_matches_binary(tmp_path):
    write_stl(tmp_path / "a.stl", box(), ascii=True)
    write_stl(tmp_path / "b.stl", box())
    a, b = read_stl(tmp_path / "a.stl"), read_stl(tmp_path / "b.stl")
    assert a.same_as(b)
    assert (tmp_path / "a.stl").read_text().startswith("solid")


def test_binary_with_solid_header_is_not_ascii(tmp_path):
    data = b"solid facet-looking header".ljust(80, b" ") + stl_bytes(box())[80:]
    (tmp_path / "s.stl").write_bytes(data)
    assert read_stl(tmp_path / "s.stl").same_as(box())


def test_truncated_stl_names_offset(tmp_path):
    data = stl_bytes(box())
    (tmp_path / "t.stl").write_bytes(data[:84 + 5 * 50 + 17])
    with pytest.raises(FormatError) as err:
        read_stl(tmp_path / "t.stl")
    assert err.value.offset == 84 + 5 * 50
    assert "byte 334" in str(err.value)


def test_stl_trailing_and_short(tmp_path):
    (tmp_path / "x.stl").write_bytes(stl_bytes(box()) + b"\0" * 7)
    with pytest.raises(FormatError):
        read_stl(tmp_path / "x.stl")
    (tmp_path / "y.stl").write_bytes(b"\0" * 40)
    with pytest.raises(FormatError):
        read_stl(tmp_path / "y.stl")


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(data=st.binary(max_size=400))
def test_stl_fuzz_never_crashes(tmp_path, data):
    p = tmp_path / "f.stl"
    p.write_bytes(data)
    try:
        read_stl(p)
    except FormatError:
        pass


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 2**31), n=st.integers(1, 30))
def test_stl_round_trip_random_soup(tmp_path, seed, n):
    rng = np.random.default_rng(seed)
    tri = rng.normal(size=(n, 3, 3)).astype(np.float32).astype(float)
    from ostvam.mesh import TriMesh

    m = TriMesh.from_triangles(tri)
    write_stl(tmp_path / "r.stl", m)
    assert np.array_equal(read_stl(tmp_path / "r.stl").triangles, m.triangles)
    assert stl_bytes(read_stl(tmp_path / "r.stl")) == stl_bytes(m)


def test_volume_layout_2x2x2():
    vals = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    g = VoxelGrid(vals, (0.1, 0.2, 0.3), (-1.0, 0.0, 2.5))
    data = volume_bytes(g)
    assert len(data) == 4 + 2 + 12 + 24 + 24 + 32
    assert data[:4] == b"VGRD"
    assert struct.unpack("<H", data[4:6]) == (1,)
    assert struct.unpack("<3I", data[6:18]) == (2, 2, 2)
    assert struct.unpack("<3d", data[18:42]) == (0.1, 0.2, 0.3)
    assert struct.unpack("<3d", data[42:66]) == (-1.0, 0.0, 2.5)
    assert np.array_equal(np.frombuffer(data[66:], "<f4"), np.arange(8, dtype=np.float32))  # x fastest


def test_volume_round_trip_64_cubed(tmp_path, rng):
    g = VoxelGrid(rng.normal(size=(64, 64, 64)).astype(np.float32), (0.155, 0.155, 0.15), (-5.0, -5.0, -4.0))
    write_volume(tmp_path / "v.vgrd", g)
    back = read_volume(tmp_path / "v.vgrd")
    assert back.values.tobytes() == np.asarray(g.values, "<f4").tobytes()
    assert back.spacing_mm == g.spacing_mm and back.origin_mm == g.origin_mm
    assert volume_bytes(back) == (tmp_path / "v.vgrd").read_bytes()


def test_volume_rejects_corruption():
    data = volume_bytes(VoxelGrid(np.ones((2, 3, 4), np.float32), (1, 1, 1), (0, 0, 0)))
    with pytest.raises(FormatError, match="magic"):
        parse_volume(b"VGRX" + data[4:])
    with pytest.raises(FormatError, match="size"):
        parse_volume(data[:-4])
    with pytest.raises(FormatError):
        parse_volume(data[:30])
    with pytest.raises(FormatError, match="version"):
        parse_volume(data[:4] + struct.pack("<H", 9) + data[6:])


@settings(max_examples=40, deadline=None)
@given(data=st.binary(max_size=200))
def test_volume_fuzz_never_crashes(data):
    try:
        parse_volume(b"VGRD" + data)
    except FormatError:
        pass


def test_volume_manifest(tmp_path):
    g = VoxelGrid(np.zeros((2, 2, 2), np.float32), (1, 1, 1), (0, 0, 0))
    write_volume_with_manifest(tmp_path / "v.vgrd", g, config_hash="abc", rotation=3)
    assert read_volume_manifest(tmp_path / "v.vgrd") == {"config_hash": "abc", "rotation": 3}
    assert read_volume_manifest(tmp_path / "none.vgrd") == {}


def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 65536, size=(13, 17), dtype=np.uint16)
    write_pgm(tmp_path / "i.pgm", img)
    data = (tmp_path / "i.pgm").read_bytes()
    assert data.startswith(b"P5\n17 13\n65535\n")
    assert np.array_equal(read_pgm(tmp_path / "i.pgm"), img)
    with pytest.raises(ValueError):
        pgm_bytes(img.astype(float))
    (tmp_path / "bad.pgm").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "bad.pgm")


def test_frames_round_trip(tmp_path, rng):
    frames = rng.uniform(0, 3, size=(4, 5, 6)).astype(np.float32)
    st_ = ImageStack(frames, [0.0, 90.0, 180.0, 270.0], 0.12, 0.15, meta={"config_hash": "h1", "rotations": 1})
    write_frames(tmp_path / "fr", st_)
    back = read_frames(tmp_path / "fr")
    assert back.meta["config_hash"] == "h1" and back.meta["rotations"] == 1
    np.testing.assert_allclose(back.frames, frames, atol=frames.max() / 65535)
    np.testing.assert_array_equal(back.angles_deg, st_.angles_deg)
    os.remove(tmp_path / "fr" / "frame_00002.pgm")
    with pytest.raises(FormatError, match="missing"):
        read_frames(tmp_path / "fr")


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    p = tmp_path / "out.bin"
    atomic_write_bytes(p, b"one")
    atomic_write_bytes(p, b"two")
    assert p.read_bytes() == b"two"
    assert [f.name for f in tmp_path.iterdir()] == ["out.bin"]
    assert p.stat().st_mode & 0o777 == 0o666 & ~_umask()


def _umask():
    old = os.umask(0)
    os.umask(old)
    return old


def test_config_hash_check():
    check_config_hash(None, "a", "frames")
    check_config_hash("a", "a", "frames")
    check_config_hash("b", "a", "frames", force=True)
    with pytest.raises(ConfigMismatchError, match="--force"):
        check_config_hash("b", "a", "frames")


def test_sphere_stl_round_trip(tmp_path):
    m = uv_sphere(2.0, 12, 24)
    write_stl(tmp_path / "s.stl", m)
    back = read_stl(tmp_path / "s.stl")
    assert back.is_watertight()
    np.testing.assert_allclose(back.triangles, m.triangles, atol=1e-6)
