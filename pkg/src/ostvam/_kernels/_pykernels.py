"""Pure numpy implementations of the hot loops.

Same signatures and semantics as the compiled ``_ckernels`` module; used when
the extension is not built or when ``OSTVAM_PURE_PYTHON=1``.
"""
import numpy as np
from scipy import sparse


def radon(image, spacing, angles_rad, n_det, det_pitch, det_center):
    image = np.ascontiguousarray(image, dtype=float)
    ny, nx = image.shape
    xs = (np.arange(nx) - (nx - 1) / 2.0) * spacing
    ys = (np.arange(ny) - (ny - 1) / 2.0) * spacing
    s = (np.arange(n_det) - det_center) * det_pitch
    padded = np.zeros((ny + 2, nx + 2))
    padded[1:-1, 1:-1] = image
    out = np.zeros((len(angles_rad), n_det))
    for k, phi in enumerate(angles_rad):
        c, sn = np.cos(phi), np.sin(phi)
        if abs(c) >= abs(sn):
            # step over rows, interpolate along x
            fx = (s[:, None] - sn * ys[None, :]) / c / spacing + (nx - 1) / 2.0
            fx = np.clip(fx, -1.0, float(nx))
            i0 = np.floor(fx)
            w = fx - i0
            i0 = i0.astype(np.intp) + 1
            i1 = np.minimum(i0 + 1, nx + 1)
            rows = np.arange(1, ny + 1)[None, :]
            vals = (1 - w) * padded[rows, i0] + w * padded[rows, i1]
            out[k] = vals.sum(axis=1) * spacing / abs(c)
        else:
            fy = (s[:, None] - c * xs[None, :]) / sn / spacing + (ny - 1) / 2.0
            fy = np.clip(fy, -1.0, float(ny))
            i0 = np.floor(fy)
            w = fy - i0
            i0 = i0.astype(np.intp) + 1
            i1 = np.minimum(i0 + 1, ny + 1)
            cols = np.arange(1, nx + 1)[None, :]
            vals = (1 - w) * padded[i0, cols] + w * padded[i1, cols]
            out[k] = vals.sum(axis=1) * spacing / abs(sn)
    return out


def backproject(sino, angles_rad, det_pitch, det_center, nx, ny, spacing, mu, vial_radius):
    sino = np.ascontiguousarray(sino, dtype=float)
    n_det = sino.shape[1]
    xs = (np.arange(nx) - (nx - 1) / 2.0) * spacing
    ys = (np.arange(ny) - (ny - 1) / 2.0) * spacing
    xx, yy = np.meshgrid(xs, ys)
    padded = np.zeros((sino.shape[0], n_det + 2))
    padded[:, 1:-1] = sino
    out = np.zeros((ny, nx))
    r2 = vial_radius * vial_radius
    for k, phi in enumerate(angles_rad):
        c, sn = np.cos(phi), np.sin(phi)
        s = xx * c + yy * sn
        fd = s / det_pitch + det_center
        fd = np.clip(fd, -1.0, float(n_det))
        i0 = np.floor(fd)
        w = fd - i0
        i0 = i0.astype(np.intp) + 1
        i1 = np.minimum(i0 + 1, n_det + 1)
        row = padded[k]
        val = (1 - w) * row[i0] + w * row[i1]
        if mu != 0.0:
            t = -xx * sn + yy * c
            depth = np.maximum(t + np.sqrt(np.maximum(r2 - s * s, 0.0)), 0.0)
            val = val * np.exp(-mu * depth)
        out += val
    return out


def _segment_matrix(p0, d, length, depth0, mu, x_edge, y_edge, spacing, nx, ny):
    """Sparse (n_voxels x n_rays) matrix of exact per-voxel ray weights."""
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(d, dtype=float)
    length = np.asarray(length, dtype=float)
    nr = len(length)
    with np.errstate(divide="ignore", invalid="ignore"):
        kx = x_edge + np.arange(nx + 1) * spacing
        ky = y_edge + np.arange(ny + 1) * spacing
        tx = (kx[None, :] - p0[:, :1]) / d[:, :1]
        ty = (ky[None, :] - p0[:, 1:2]) / d[:, 1:2]
    ts = np.concatenate([np.zeros((nr, 1)), length[:, None], tx, ty], axis=1)
    ts = np.where(np.isfinite(ts), ts, 0.0)
    ts = np.clip(ts, 0.0, length[:, None])
    ts.sort(axis=1)
    ta, tb = ts[:, :-1], ts[:, 1:]
    seg = tb - ta
    tm = 0.5 * (ta + tb)
    mx = p0[:, :1] + tm * d[:, :1]
    my = p0[:, 1:2] + tm * d[:, 1:2]
    ix = np.floor((mx - x_edge) / spacing).astype(np.intp)
    iy = np.floor((my - y_edge) / spacing).astype(np.intp)
    ok = (seg > 0) & (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    if mu != 0.0:
        dep = np.asarray(depth0, dtype=float)[:, None]
        w = (np.exp(-mu * (dep + ta)) - np.exp(-mu * (dep + tb))) / mu
    else:
        w = seg
    rays = np.broadcast_to(np.arange(nr)[:, None], ta.shape)
    vox = iy * nx + ix
    return sparse.csr_matrix(
        (w[ok], (vox[ok], rays[ok])), shape=(nx * ny, nr)
    )


def deposit_rays(dose, p0, d, length, depth0, weights, mu, x_edge, y_edge, spacing):
    ny, nx, nz = dose.shape
    a = _segment_matrix(p0, d, length, depth0, mu, x_edge, y_edge, spacing, nx, ny)
    dose += (a @ np.asarray(weights, dtype=float)).reshape(ny, nx, nz)


def integrate_rays(field, p0, d, length, x_edge, y_edge, spacing):
    ny, nx, nz = field.shape
    a = _segment_matrix(p0, d, length, np.zeros(len(length)), 0.0, x_edge, y_edge, spacing, nx, ny)
    return np.asarray(a.T @ np.asarray(field, dtype=float).reshape(ny * nx, nz))
