"""Pure numpy Joseph projector kernels (fallback for the compiled core).

Rays are given as origin ``(ox, oy)`` and unit direction ``(dx, dy)``.
Rays with ``|dx| >= |dy|`` are stepped column by column, the others row by
row; at each step the two neighbouring pixel centres are linearly
interpolated. With ``sx, sy`` given, every pixel sample is additionally
scaled by ``radius / |pixel - source|`` (fan-beam backprojection weight).

Pixel ``(i, j)`` has centre ``x = (j - c) * pix``, ``y = (c - i) * pix``
with ``c = (n - 1) / 2``.
"""

import numpy as np

_CHUNK = 1 << 18


def _samples(n, pix, ox, oy, dx, dy, horizontal):
    """Per-(ray, step) minor index, fraction, and the step's major index."""
    c = 0.5 * (n - 1)
    major = np.arange(n)
    pos = (major - c) * pix if horizontal else (c - major) * pix
    if horizontal:
        s = (pos[None, :] - ox[:, None]) / dx[:, None]
        minor = c - (oy[:, None] + s * dy[:, None]) / pix
        step = pix / np.abs(dx)
    else:
        s = (pos[None, :] - oy[:, None]) / dy[:, None]
        minor = c + (ox[:, None] + s * dx[:, None]) / pix
        step = pix / np.abs(dy)
    i0 = np.floor(minor)
    frac = minor - i0
    i0 = i0.astype(np.int64)
    return i0, frac, step, np.broadcast_to(major, i0.shape)


def _pixel_weight(n, pix, rows, cols, sx, sy, radius):
    c = 0.5 * (n - 1)
    x = (cols - c) * pix
    y = (c - rows) * pix
    return radius / np.hypot(x - sx[:, None], y - sy[:, None])


def _terms(n, pix, ox, oy, dx, dy, horizontal, sx, sy, radius):
    """Yield (flat pixel index, weight) pairs for the two interpolation taps."""
    i0, frac, step, major = _samples(n, pix, ox, oy, dx, dy, horizontal)
    for tap, w in ((i0, 1.0 - frac), (i0 + 1, frac)):
        valid = (tap >= 0) & (tap < n)
        tap_c = np.where(valid, tap, 0)
        w = np.where(valid, w, 0.0) * step[:, None]
        if horizontal:
            rows, cols = tap_c, major
        else:
            rows, cols = major, tap_c
        if sx is not None:
            w = w * _pixel_weight(n, pix, rows, cols, sx, sy, radius)
        yield rows * n + cols, w


def _chunks(nrays, n):
    size = max(1, _CHUNK // max(n, 1))
    for lo in range(0, nrays, size):
        yield slice(lo, min(nrays, lo + size))


def forward(img, ox, oy, dx, dy, pix, sx=None, sy=None, radius=0.0):
    n = img.shape[0]
    flat = np.ascontiguousarray(img, dtype=np.float64).ravel()
    out = np.zeros(ox.shape[0], dtype=np.float64)
    horiz = np.abs(dx) >= np.abs(dy)
    for mode in (True, False):
        sel = np.flatnonzero(horiz == mode)
        for part in _chunks(sel.size, n):
            r = sel[part]
            wsx = None if sx is None else sx[r]
            wsy = None if sy is None else sy[r]
            acc = np.zeros(r.size)
            for idx, w in _terms(n, pix, ox[r], oy[r], dx[r], dy[r], mode, wsx, wsy, radius):
                acc += (flat[idx] * w).sum(axis=1)
            out[r] = acc
    return out


def adjoint(sino, ox, oy, dx, dy, n, pix, sx=None, sy=None, radius=0.0):
    g = np.ascontiguousarray(sino, dtype=np.float64).ravel()
    out = np.zeros(n * n, dtype=np.float64)
    horiz = np.abs(dx) >= np.abs(dy)
    for mode in (True, False):
        sel = np.flatnonzero(horiz == mode)
        for part in _chunks(sel.size, n):
            r = sel[part]
            wsx = None if sx is None else sx[r]
            wsy = None if sy is None else sy[r]
            for idx, w in _terms(n, pix, ox[r], oy[r], dx[r], dy[r], mode, wsx, wsy, radius):
                out += np.bincount(idx.ravel(), weights=(w * g[r][:, None]).ravel(), minlength=n * n)
    return out.reshape(n, n)
