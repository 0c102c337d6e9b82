"""Analytic ellipse phantoms.

Coordinates are normalised so the image spans [-1, 1] in both directions,
``x`` to the right and ``y`` up; pixel ``(i, j)`` has its centre at
``((2j - n + 1) / n, (n - 1 - 2i) / n)``.
"""

from __future__ import annotations

from typing import Iterable, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .projector import ImageGrid

# (intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees); modified
# Shepp-Logan intensities (Toft), which keep the soft-tissue contrast visible.
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def pixel_centres(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normalised (x, y) pixel-centre coordinates, each of shape (n, n)."""
    t = (2.0 * np.arange(n) - n + 1) / n
    return np.meshgrid(t, -t)


def rasterize(ellipses: Iterable[Sequence[float]], n: int) -> np.ndarray:
    """Sum of ellipse indicators sampled at pixel centres."""
    x, y = pixel_centres(n)
    img = np.zeros((n, n))
    for value, a, b, x0, y0, deg in ellipses:
        th = np.radians(deg)
        c, s = np.cos(th), np.sin(th)
        u = (x - x0) * c + (y - y0) * s
        v = -(x - x0) * s + (y - y0) * c
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    return img


def ellipse_mass(ellipses: Iterable[Sequence[float]]) -> float:
    """Analytic integral of the phantom over the normalised square."""
    return float(sum(value * np.pi * a * b for value, a, b, *_ in ellipses))


def shepp_logan(n: int, pixel_size: float = 1.0) -> ImageGrid:
    """Ten-ellipse Shepp-Logan head phantom on an ``n x n`` grid."""
    return ImageGrid(rasterize(SHEPP_LOGAN, n), pixel_size)


def random_ellipses(ellipse_count: int, rng: np.random.Generator):
    """A body ellipse plus ``ellipse_count - 1`` structures inside it."""
    body_a, body_b = rng.uniform(0.65, 0.9, size=2)
    ell = [(1.0, body_a, body_b, 0.0, 0.0, rng.uniform(0.0, 180.0))]
    for _ in range(ellipse_count - 1):
        r = rng.uniform(0.0, 0.55)
        phi = rng.uniform(0.0, 2 * np.pi)
        x0, y0 = r * body_a * np.cos(phi), r * body_b * np.sin(phi)
        room = min(body_a, body_b) * (1.0 - r) * 0.9
        a, b = rng.uniform(0.08, max(0.1, min(0.35, room)), size=2)
        value = rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.6)
        ell.append((value, a, b, x0, y0, rng.uniform(0.0, 180.0)))
    return ell


def random_ellipse_phantom(n: int, ellipse_count: int, seed, pixel_size: float = 1.0,
                           supersample: int = 1, edge_sigma: float = 0.0) -> ImageGrid:
    """Seeded random phantom confined to the inscribed disk, clipped at zero.

    Parameters
    ----------
    n : int
        Grid size.
    ellipse_count : int
        Body ellipse plus ``ellipse_count - 1`` inner structures.
    seed : int or sequence of int
        Seed for ``numpy.random.default_rng``.
    pixel_size : float
    supersample : int
        Rasterise on an ``n * supersample`` grid and box-average down
        (partial-volume edges).
    edge_sigma : float
        Gaussian edge softening in pixels; 0 keeps hard edges.
    """
    rng = np.random.default_rng(seed)
    ell = random_ellipses(max(1, ellipse_count), rng)
    s = max(1, int(supersample))
    img = rasterize(ell, n * s).reshape(n, s, n, s).mean(axis=(1, 3))
    if edge_sigma > 0:
        img = gaussian_filter(img, edge_sigma, mode="constant")
    x, y = pixel_centres(n)
    img = np.where(x * x + y * y <= 1.0, np.clip(img, 0.0, None), 0.0)
    return ImageGrid(img, pixel_size)
