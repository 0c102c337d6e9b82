"""Forward projection, its exact adjoint, ramp filtering and FBP.

All operator math runs in double precision. Arrays may carry leading batch
dimensions; the last two axes are (rows, cols) for images and
(views, detectors) for sinograms.

FBP is factored as ``scale * B(R(W p))`` where ``W`` is a diagonal detector
pre-weight, ``R`` the (symmetric) ramp filter and ``B`` the literal transpose
of a Joseph projector (pixel-weighted for fan beam). Its adjoint is therefore
``W R B^T`` applied with the same kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import _backend
from .errors import ConfigurationError, DimensionError
from .geometry import ScanGeometry

WINDOWS = ("ram-lak", "hann")
DEFAULT_WINDOW = "hann"


@dataclass
class Sinogram:
    data: np.ndarray
    geom: ScanGeometry

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape[-2:] != self.geom.sinogram_shape:
            raise DimensionError(f"sinogram shape {self.data.shape} does not match geometry "
                                 f"{self.geom.sinogram_shape}")


@dataclass
class ImageGrid:
    data: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim < 2 or self.data.shape[-1] != self.data.shape[-2]:
            raise DimensionError(f"image must be square, got shape {self.data.shape}")


@dataclass(frozen=True)
class _Rays:
    ox: np.ndarray
    oy: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    sx: Optional[np.ndarray]
    sy: Optional[np.ndarray]
    radius: float


@lru_cache(maxsize=64)
def _rays(geom: ScanGeometry) -> _Rays:
    theta = np.radians(geom.view_angles())[:, None]
    det = geom.detector_positions()[None, :]
    if geom.is_fan:
        R = geom.source_to_center
        sx = np.broadcast_to(R * np.cos(theta), (geom.n_views, geom.n_detectors))
        sy = np.broadcast_to(R * np.sin(theta), (geom.n_views, geom.n_detectors))
        phi = theta + math.pi + det
        ox, oy = sx, sy
        dx, dy = np.cos(phi), np.sin(phi)
        flat = [np.ascontiguousarray(a, dtype=np.float64).ravel() for a in (ox, oy, dx, dy, sx, sy)]
        return _Rays(*flat, radius=float(R))
    ox = det * np.cos(theta)
    oy = det * np.sin(theta)
    dx = np.broadcast_to(-np.sin(theta), ox.shape)
    dy = np.broadcast_to(np.cos(theta), ox.shape)
    flat = [np.ascontiguousarray(a, dtype=np.float64).ravel() for a in (ox, oy, dx, dy)]
    return _Rays(*flat, None, None, radius=0.0)


def _check_image(x: np.ndarray, geom: ScanGeometry):
    if x.shape[-2:] != geom.image_shape:
        raise DimensionError(f"image shape {x.shape[-2:]} does not match geometry grid {geom.image_shape}")


def _check_sino(p: np.ndarray, geom: ScanGeometry):
    if p.shape[-2:] != geom.sinogram_shape:
        raise DimensionError(f"sinogram shape {p.shape[-2:]} does not match geometry {geom.sinogram_shape}")


def project_array(x, geom: ScanGeometry, weighted: bool = False, backend: Optional[str] = None):
    """Apply ``A`` (or the pixel-weighted ``A_w``) to an image array."""
    x = np.asarray(x, dtype=np.float64)
    _check_image(x, geom)
    k = _backend.get(backend)
    rays = _rays(geom)
    wargs = (rays.sx, rays.sy, rays.radius) if weighted and geom.is_fan else (None, None, 0.0)
    lead = x.shape[:-2]
    flat = x.reshape((-1,) + geom.image_shape)
    out = np.empty((flat.shape[0],) + geom.sinogram_shape)
    for b in range(flat.shape[0]):
        img = np.ascontiguousarray(flat[b])
        out[b] = k.forward(img, rays.ox, rays.oy, rays.dx, rays.dy, geom.pixel_size,
                           *wargs).reshape(geom.sinogram_shape)
    return out.reshape(lead + geom.sinogram_shape)


def backproject_array(p, geom: ScanGeometry, weighted: bool = False, backend: Optional[str] = None):
    """Apply ``A^T`` (or ``A_w^T``) to a sinogram array."""
    p = np.asarray(p, dtype=np.float64)
    _check_sino(p, geom)
    k = _backend.get(backend)
    rays = _rays(geom)
    wargs = (rays.sx, rays.sy, rays.radius) if weighted and geom.is_fan else (None, None, 0.0)
    lead = p.shape[:-2]
    flat = p.reshape((-1,) + geom.sinogram_shape)
    out = np.empty((flat.shape[0],) + geom.image_shape)
    n = geom.grid_size
    for b in range(flat.shape[0]):
        row = np.ascontiguousarray(flat[b]).ravel()
        out[b] = k.adjoint(row, rays.ox, rays.oy, rays.dx, rays.dy, n, geom.pixel_size, *wargs)
    return out.reshape(lead + geom.image_shape)


def forward_project(img, geom: ScanGeometry, backend: Optional[str] = None) -> Sinogram:
    """Discrete line integrals of ``img`` along every ray of ``geom``."""
    data = img.data if isinstance(img, ImageGrid) else img
    if isinstance(img, ImageGrid) and not math.isclose(img.pixel_size, geom.pixel_size):
        raise DimensionError(f"image pixel size {img.pixel_size} != geometry pixel size {geom.pixel_size}")
    return Sinogram(project_array(data, geom, backend=backend), geom)


def back_project(p, geom: Optional[ScanGeometry] = None, backend: Optional[str] = None) -> ImageGrid:
    """Exact matrix adjoint of :func:`forward_project`."""
    if geom is None:
        geom = p.geom
    data = p.data if isinstance(p, Sinogram) else p
    return ImageGrid(backproject_array(data, geom, backend=backend), geom.pixel_size)


# -- ramp filter -------------------------------------------------------------

def _padded_length(n_detectors: int) -> int:
    return max(64, 2 * (1 << int(math.ceil(math.log2(max(n_detectors, 2))))))


def _sample_spacing(geom: ScanGeometry) -> float:
    return math.radians(geom.fan_increment) if geom.is_fan else geom.detector_spacing


@lru_cache(maxsize=64)
def _frequency_response(n_detectors: int, spacing: float, window: str, fan: bool) -> np.ndarray:
    # Built from the band-limited spatial ramp kernel (1/(4 tau^2) at lag 0,
    # -1/(pi n tau)^2 at odd lags) rather than by sampling |f|: the sampled
    # version has a zero DC bin and biases reconstructions low.
    if window not in WINDOWS:
        raise ConfigurationError(f"unknown filter window {window!r}; expected one of {WINDOWS}")
    npad = _padded_length(n_detectors)
    n = np.fft.fftfreq(npad, d=1.0 / npad)
    kernel = np.zeros(npad)
    kernel[0] = 0.25 / spacing ** 2
    odd = n % 2 == 1
    kernel[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    if fan:
        # equiangular correction (gamma / sin gamma)^2 applied lag-wise; keeps the kernel even
        lag = n * spacing
        nz = lag != 0
        kernel[nz] *= (lag[nz] / np.sin(lag[nz])) ** 2
    resp = np.fft.fft(kernel * spacing).real
    if window == "hann":
        f = np.fft.fftfreq(npad, d=spacing)
        resp = resp * 0.5 * (1.0 + np.cos(np.pi * f * 2.0 * spacing))
    # The truncated kernel sums to a small positive DC gain. A spike at lag
    # npad/2 cancels it; that lag never reaches the detector window
    # (npad >= 2 * n_detectors), so filtered rows are unchanged.
    resp = resp - resp[0] * np.where(np.arange(npad) % 2 == 0, 1.0, -1.0)
    resp.setflags(write=False)
    return resp


def ramp_kernel(geom: ScanGeometry, window: str = DEFAULT_WINDOW) -> np.ndarray:
    """Circular spatial kernel (length of the padded transform) used by the filter."""
    return np.fft.ifft(_frequency_response(geom.n_detectors, _sample_spacing(geom), window, geom.is_fan)).real


def ramp_filter_array(p, geom: ScanGeometry, window: str = DEFAULT_WINDOW, truncate: bool = True):
    """Row-wise ramp filtering of a sinogram array (symmetric linear map)."""
    p = np.asarray(p, dtype=np.float64)
    nd = p.shape[-1]
    if nd < 2:
        raise DimensionError("ramp filter needs at least 2 detectors")
    resp = _frequency_response(nd, _sample_spacing(geom), window, geom.is_fan)
    npad = resp.size
    spec = np.fft.fft(p, n=npad, axis=-1)
    out = np.fft.ifft(spec * resp, axis=-1).real
    return out[..., :nd] if truncate else out


def ramp_filter(p: Sinogram, window: str = DEFAULT_WINDOW) -> Sinogram:
    return Sinogram(ramp_filter_array(p.data, p.geom, window), p.geom)


# -- filtered backprojection -------------------------------------------------

def fbp_scale(geom: ScanGeometry) -> float:
    """Scalar in front of the backprojection.

    Angular weight ``d_theta * pi / max(extent, pi)`` (halves redundant
    360-degree data) times the ray-density normalisation of the Joseph
    transpose.
    """
    dtheta = math.radians(geom.view_increment)
    extent = math.radians(geom.angular_range[1])
    angular = dtheta * math.pi / max(extent, math.pi)
    area = geom.pixel_size ** 2
    return angular * _sample_spacing(geom) / area


def _preweight(geom: ScanGeometry) -> Optional[np.ndarray]:
    if geom.is_fan:
        return np.cos(geom.detector_positions())
    return None


@lru_cache(maxsize=64)
def _fov(geom: ScanGeometry) -> Optional[np.ndarray]:
    # FBP is only meaningful where every view has data; zero the rest
    mask = geom.fov_mask()
    if mask.all():
        return None
    mask.setflags(write=False)
    return mask


def fbp_array(p, geom: ScanGeometry, window: str = DEFAULT_WINDOW, backend: Optional[str] = None):
    """FBP of an array with optional leading batch dimensions.

    Pixels outside the field of view (see ``ScanGeometry.fov_radius``) are
    set to zero.
    """
    p = np.asarray(p, dtype=np.float64)
    _check_sino(p, geom)
    w = _preweight(geom)
    if w is not None:
        p = p * w
    q = ramp_filter_array(p, geom, window)
    img = fbp_scale(geom) * backproject_array(q, geom, weighted=True, backend=backend)
    mask = _fov(geom)
    return img if mask is None else img * mask


def fbp_adjoint_array(img, geom: ScanGeometry, window: str = DEFAULT_WINDOW, backend: Optional[str] = None):
    """Transpose of :func:`fbp_array` (image -> sinogram)."""
    img = np.asarray(img, dtype=np.float64)
    mask = _fov(geom)
    if mask is not None:
        img = img * mask
    q = project_array(img, geom, weighted=True, backend=backend)
    q = ramp_filter_array(q, geom, window)
    w = _preweight(geom)
    if w is not None:
        q = q * w
    return fbp_scale(geom) * q


def fbp(p, geom: Optional[ScanGeometry] = None, window: str = DEFAULT_WINDOW,
        backend: Optional[str] = None) -> ImageGrid:
    """Filtered backprojection of a sinogram onto the geometry's image grid."""
    if geom is None:
        geom = p.geom
    data = p.data if isinstance(p, Sinogram) else p
    return ImageGrid(fbp_array(data, geom, window, backend=backend), geom.pixel_size)
