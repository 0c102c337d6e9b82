# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled Joseph projector kernels.

Same ray parameterisation and interpolation as ``_joseph_py``; see there.
"""

import numpy as np
from libc.math cimport floor, ceil, fabs, sqrt


cdef inline void _span(double m0, double slope, int n, int* lo, int* hi) nogil:
    # steps k with -1 <= m0 + k * slope < n (one step of slack on both sides)
    cdef double a, b
    if slope == 0.0:
        if m0 < -1.0 or m0 >= n:
            lo[0] = 0
            hi[0] = 0
        else:
            lo[0] = 0
            hi[0] = n
        return
    a = (-1.0 - m0) / slope
    b = (n - m0) / slope
    if a > b:
        a, b = b, a
    # near-zero slopes give huge bounds; clamp before the int cast
    if a < -2.0:
        a = -2.0
    if b > n + 2.0:
        b = n + 2.0
    if a > n + 2.0 or b < -2.0:
        lo[0] = 0
        hi[0] = 0
        return
    lo[0] = <int>floor(a) - 1
    hi[0] = <int>ceil(b) + 2
    if lo[0] < 0:
        lo[0] = 0
    if hi[0] > n:
        hi[0] = n


cdef inline double _weight(int i, int j, double c, double pix,
                           double sx, double sy, double radius) nogil:
    cdef double x = (j - c) * pix - sx
    cdef double y = (c - i) * pix - sy
    return radius / sqrt(x * x + y * y)


def forward(const double[:, ::1] img, const double[::1] ox, const double[::1] oy,
            const double[::1] dx, const double[::1] dy, double pix,
            const double[::1] sx=None, const double[::1] sy=None, double radius=0.0):
    cdef Py_ssize_t nr = ox.shape[0]
    cdef int n = img.shape[0]
    cdef bint weighted = sx is not None
    cdef double c = 0.5 * (n - 1)
    cdef double[::1] out = np.zeros(nr, dtype=np.float64)
    cdef Py_ssize_t r
    cdef int k, i0, lo, hi
    cdef double acc, step, slope, m0, minor, frac, ws0, ws1, rsx = 0.0, rsy = 0.0
    with nogil:
        for r in range(nr):
            acc = 0.0
            if weighted:
                rsx = sx[r]
                rsy = sy[r]
            if fabs(dx[r]) >= fabs(dy[r]):
                step = pix / fabs(dx[r])
                slope = -dy[r] / dx[r]
                m0 = c - (oy[r] + (-c * pix - ox[r]) / dx[r] * dy[r]) / pix
                _span(m0, slope, n, &lo, &hi)
                for k in range(lo, hi):
                    minor = m0 + k * slope
                    i0 = <int>(minor + 4.0) - 4  # floor for minor > -4
                    frac = minor - i0
                    if i0 < -1 or i0 >= n:
                        continue
                    ws0 = (1.0 - frac) * step
                    ws1 = frac * step
                    if 0 <= i0:
                        if weighted:
                            ws0 = ws0 * _weight(i0, k, c, pix, rsx, rsy, radius)
                        acc = acc + img[i0, k] * ws0
                    if i0 + 1 < n:
                        if weighted:
                            ws1 = ws1 * _weight(i0 + 1, k, c, pix, rsx, rsy, radius)
                        acc = acc + img[i0 + 1, k] * ws1
            else:
                step = pix / fabs(dy[r])
                slope = -dx[r] / dy[r]
                m0 = c + (ox[r] + (c * pix - oy[r]) / dy[r] * dx[r]) / pix
                _span(m0, slope, n, &lo, &hi)
                for k in range(lo, hi):
                    minor = m0 + k * slope
                    i0 = <int>(minor + 4.0) - 4  # floor for minor > -4
                    frac = minor - i0
                    if i0 < -1 or i0 >= n:
                        continue
                    ws0 = (1.0 - frac) * step
                    ws1 = frac * step
                    if 0 <= i0:
                        if weighted:
                            ws0 = ws0 * _weight(k, i0, c, pix, rsx, rsy, radius)
                        acc = acc + img[k, i0] * ws0
                    if i0 + 1 < n:
                        if weighted:
                            ws1 = ws1 * _weight(k, i0 + 1, c, pix, rsx, rsy, radius)
                        acc = acc + img[k, i0 + 1] * ws1
            out[r] = acc
    return np.asarray(out)


def adjoint(const double[::1] sino, const double[::1] ox, const double[::1] oy,
            const double[::1] dx, const double[::1] dy, int n, double pix,
            const double[::1] sx=None, const double[::1] sy=None, double radius=0.0):
    cdef Py_ssize_t nr = ox.shape[0]
    cdef bint weighted = sx is not None
    cdef double c = 0.5 * (n - 1)
    cdef double[:, ::1] out = np.zeros((n, n), dtype=np.float64)
    cdef Py_ssize_t r
    cdef int k, i0, lo, hi
    cdef double g, step, slope, m0, minor, frac, ws0, ws1, rsx = 0.0, rsy = 0.0
    with nogil:
        for r in range(nr):
            g = sino[r]
            if g == 0.0:
                continue
            if weighted:
                rsx = sx[r]
                rsy = sy[r]
            if fabs(dx[r]) >= fabs(dy[r]):
                step = pix / fabs(dx[r])
                slope = -dy[r] / dx[r]
                m0 = c - (oy[r] + (-c * pix - ox[r]) / dx[r] * dy[r]) / pix
                _span(m0, slope, n, &lo, &hi)
                for k in range(lo, hi):
                    minor = m0 + k * slope
                    i0 = <int>(minor + 4.0) - 4  # floor for minor > -4
                    frac = minor - i0
                    if i0 < -1 or i0 >= n:
                        continue
                    ws0 = (1.0 - frac) * step
                    ws1 = frac * step
                    if 0 <= i0:
                        if weighted:
                            ws0 = ws0 * _weight(i0, k, c, pix, rsx, rsy, radius)
                        out[i0, k] += g * ws0
                    if i0 + 1 < n:
                        if weighted:
                            ws1 = ws1 * _weight(i0 + 1, k, c, pix, rsx, rsy, radius)
                        out[i0 + 1, k] += g * ws1
            else:
                step = pix / fabs(dy[r])
                slope = -dx[r] / dy[r]
                m0 = c + (ox[r] + (c * pix - oy[r]) / dy[r] * dx[r]) / pix
                _span(m0, slope, n, &lo, &hi)
                for k in range(lo, hi):
                    minor = m0 + k * slope
                    i0 = <int>(minor + 4.0) - 4  # floor for minor > -4
                    frac = minor - i0
                    if i0 < -1 or i0 >= n:
                        continue
                    ws0 = (1.0 - frac) * step
                    ws1 = frac * step
                    if 0 <= i0:
                        if weighted:
                            ws0 = ws0 * _weight(k, i0, c, pix, rsx, rsy, radius)
                        out[k, i0] += g * ws0
                    if i0 + 1 < n:
                        if weighted:
                            ws1 = ws1 * _weight(k, i0 + 1, c, pix, rsx, rsy, radius)
                        out[k, i0 + 1] += g * ws1
    return np.asarray(out)
