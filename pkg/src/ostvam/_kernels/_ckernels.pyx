# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: Joseph projector, linear back-projector, and exact
length-weighted ray traversal (deposit and gather) on a 2D grid with a
contiguous trailing z axis."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, floor, fabs, exp, INFINITY

cnp.import_array()


cdef inline double _lerp_row(const double* row, int n, double idx) nogil:
    # linear interpolation with zero outside [0, n-1]
    cdef double fi, w, a = 0.0, b = 0.0
    cdef int i0
    if idx <= -1.0 or idx >= n:
        return 0.0
    fi = floor(idx)
    i0 = <int>fi
    w = idx - fi
    if i0 >= 0:
        a = row[i0]
    if i0 + 1 < n:
        b = row[i0 + 1]
    return (1.0 - w) * a + w * b


def radon(double[:, ::1] image, double spacing, double[::1] angles_rad,
          int n_det, double det_pitch, double det_center):
    cdef int ny = image.shape[0], nx = image.shape[1]
    cdef int na = angles_rad.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.zeros((na, n_det))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] image_t = np.ascontiguousarray(np.asarray(image).T)
    cdef int k, j, i
    cdef double c, sn, s, acc, pos, wgt, cx = (nx - 1) / 2.0, cy = (ny - 1) / 2.0
    with nogil:
        for k in range(na):
            c = cos(angles_rad[k])
            sn = sin(angles_rad[k])
            if fabs(c) >= fabs(sn):
                wgt = spacing / fabs(c)
                for j in range(n_det):
                    s = (j - det_center) * det_pitch
                    acc = 0.0
                    for i in range(ny):
                        pos = (s - sn * (i - cy) * spacing) / c / spacing + cx
                        acc = acc + _lerp_row(&image[i, 0], nx, pos)
                    out[k, j] = acc * wgt
            else:
                wgt = spacing / fabs(sn)
                for j in range(n_det):
                    s = (j - det_center) * det_pitch
                    acc = 0.0
                    for i in range(nx):
                        pos = (s - c * (i - cx) * spacing) / sn / spacing + cy
                        acc = acc + _lerp_row(&image_t[i, 0], ny, pos)
                    out[k, j] = acc * wgt
    return out_arr


def backproject(double[:, ::1] sino, double[::1] angles_rad, double det_pitch,
                double det_center, int nx, int ny, double spacing, double mu,
                double vial_radius):
    cdef int na = sino.shape[0], n_det = sino.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.zeros((ny, nx))
    cdef double[:, ::1] out = out_arr
    cdef int k, ix, iy
    cdef double c, sn, x, y, s, t, val, depth, r2 = vial_radius * vial_radius, rem
    cdef double cx = (nx - 1) / 2.0, cy = (ny - 1) / 2.0
    with nogil:
        for k in range(na):
            c = cos(angles_rad[k])
            sn = sin(angles_rad[k])
            for iy in range(ny):
                y = (iy - cy) * spacing
                for ix in range(nx):
                    x = (ix - cx) * spacing
                    s = x * c + y * sn
                    val = _lerp_row(&sino[k, 0], n_det, s / det_pitch + det_center)
                    if mu != 0.0:
                        t = -x * sn + y * c
                        rem = r2 - s * s
                        if rem < 0.0:
                            rem = 0.0
                        depth = t + sqrt(rem)
                        if depth < 0.0:
                            depth = 0.0
                        val = val * exp(-mu * depth)
                    out[iy, ix] += val
    return out_arr


cdef inline int _clampi(int v, int lo, int hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


cdef int _box_clip(double px, double py, double dx, double dy, double length,
                   double wx, double wy, double* t0, double* t1) nogil:
    # clip the parametric ray [0, length] to the box [0, wx] x [0, wy]
    cdef double lo = 0.0, hi = length, a, b, tmp
    if dx != 0.0:
        a = (0.0 - px) / dx
        b = (wx - px) / dx
        if a > b:
            tmp = a; a = b; b = tmp
        if a > lo:
            lo = a
        if b < hi:
            hi = b
    elif px < 0.0 or px > wx:
        return 0
    if dy != 0.0:
        a = (0.0 - py) / dy
        b = (wy - py) / dy
        if a > b:
            tmp = a; a = b; b = tmp
        if a > lo:
            lo = a
        if b < hi:
            hi = b
    elif py < 0.0 or py > wy:
        return 0
    if hi <= lo:
        return 0
    t0[0] = lo
    t1[0] = hi
    return 1


cdef void _traverse(double px, double py, double dx, double dy, double length,
                    int nx, int ny, double spacing, double depth0, double mu,
                    double[:, :, ::1] grid, double[:] wz, double[:] acc,
                    int mode) nogil:
    # mode 0: grid[iy, ix, :] += w_seg * wz ; mode 1: acc[:] += w_seg * grid[iy, ix, :]
    cdef double t0, t1, t, tn, tmx, tmy, tdx, tdy, wseg, mx, my
    cdef int ix, iy, stx, sty, z, nz = grid.shape[2]
    if not _box_clip(px, py, dx, dy, length, nx * spacing, ny * spacing, &t0, &t1):
        return
    t = t0
    # voxel of the first segment from a point slightly inside
    mx = px + (t0 + 1e-9 * spacing) * dx
    my = py + (t0 + 1e-9 * spacing) * dy
    ix = _clampi(<int>floor(mx / spacing), 0, nx - 1)
    iy = _clampi(<int>floor(my / spacing), 0, ny - 1)
    if dx > 0.0:
        stx = 1
        tmx = ((ix + 1) * spacing - px) / dx
        tdx = spacing / dx
    elif dx < 0.0:
        stx = -1
        tmx = (ix * spacing - px) / dx
        tdx = -spacing / dx
    else:
        stx = 0
        tmx = INFINITY
        tdx = INFINITY
    if dy > 0.0:
        sty = 1
        tmy = ((iy + 1) * spacing - py) / dy
        tdy = spacing / dy
    elif dy < 0.0:
        sty = -1
        tmy = (iy * spacing - py) / dy
        tdy = -spacing / dy
    else:
        sty = 0
        tmy = INFINITY
        tdy = INFINITY
    while t < t1:
        tn = tmx if tmx < tmy else tmy
        if tn > t1:
            tn = t1
        if tn > t:
            if mu != 0.0:
                wseg = (exp(-mu * (depth0 + t)) - exp(-mu * (depth0 + tn))) / mu
            else:
                wseg = tn - t
            if mode == 0:
                for z in range(nz):
                    grid[iy, ix, z] += wseg * wz[z]
            else:
                for z in range(nz):
                    acc[z] += wseg * grid[iy, ix, z]
        t = tn
        if tmx < tmy:
            ix = ix + stx
            tmx = tmx + tdx
        else:
            iy = iy + sty
            tmy = tmy + tdy
        if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
            break


def deposit_rays(double[:, :, ::1] dose, double[:, ::1] p0, double[:, ::1] d,
                 double[::1] length, double[::1] depth0, double[:, ::1] weights,
                 double mu, double x_edge, double y_edge, double spacing):
    cdef int nr = length.shape[0], r
    cdef int ny = dose.shape[0], nx = dose.shape[1]
    cdef double[::1] dummy = np.zeros(1)
    with nogil:
        for r in range(nr):
            _traverse(p0[r, 0] - x_edge, p0[r, 1] - y_edge, d[r, 0], d[r, 1],
                      length[r], nx, ny, spacing, depth0[r], mu, dose,
                      weights[r], dummy, 0)


def integrate_rays(double[:, :, ::1] field, double[:, ::1] p0, double[:, ::1] d,
                   double[::1] length, double x_edge, double y_edge, double spacing):
    cdef int nr = length.shape[0], r
    cdef int ny = field.shape[0], nx = field.shape[1], nz = field.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.zeros((nr, nz))
    cdef double[:, ::1] out = out_arr
    cdef double[::1] dummy = np.zeros(nz)
    with nogil:
        for r in range(nr):
            _traverse(p0[r, 0] - x_edge, p0[r, 1] - y_edge, d[r, 0], d[r, 1],
                      length[r], nx, ny, spacing, 0.0, 0.0, field,
                      dummy, out[r], 1)
    return out_arr
