"""Scan geometries, view masks and sparse/limited-view extraction."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError

BEAM_MODES = ("parallel", "fan-equiangular")


@dataclass(frozen=True)
class ScanGeometry:
    """Acquisition description shared by every operator.

    Angles are in degrees, lengths in arbitrary but consistent units.
    ``detector_spacing`` applies to parallel beam; ``fan_increment`` and
    ``source_to_center`` apply to the equiangular fan beam.
    """

    beam_mode: str
    n_views: int
    angular_range: Tuple[float, float]
    n_detectors: int
    grid_size: int
    pixel_size: float = 1.0
    detector_spacing: Optional[float] = None
    fan_increment: Optional[float] = None
    source_to_center: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "angular_range", tuple(float(a) for a in self.angular_range))
        if self.beam_mode not in BEAM_MODES:
            raise ConfigurationError(f"unknown beam_mode {self.beam_mode!r}; expected one of {BEAM_MODES}")
        if self.n_views < 1 or self.n_detectors < 1 or self.grid_size < 1:
            raise ConfigurationError(
                f"n_views, n_detectors and grid_size must be >= 1 "
                f"(got {self.n_views}, {self.n_detectors}, {self.grid_size})"
            )
        if not self.pixel_size > 0:
            raise ConfigurationError(f"pixel_size must be > 0, got {self.pixel_size}")
        if not self.angular_range[1] > 0:
            raise ConfigurationError(f"angular extent must be > 0, got {self.angular_range[1]}")
        if self.beam_mode == "parallel":
            if self.detector_spacing is None or not self.detector_spacing > 0:
                raise ConfigurationError("parallel beam needs detector_spacing > 0")
        else:
            if self.fan_increment is None or not self.fan_increment > 0:
                raise ConfigurationError("fan beam needs fan_increment > 0")
            half_diag = self.grid_size * self.pixel_size / math.sqrt(2.0)
            if self.source_to_center is None or not self.source_to_center > half_diag:
                raise ConfigurationError(
                    f"source_to_center must exceed the image half-diagonal {half_diag:g} "
                    f"(got {self.source_to_center})"
                )
            half_fan = 0.5 * (self.n_detectors - 1) * self.fan_increment
            if half_fan >= 90.0:
                raise ConfigurationError(f"fan half-angle {half_fan:g} deg must be below 90")

    # -- derived quantities -------------------------------------------------

    @property
    def is_fan(self) -> bool:
        return self.beam_mode == "fan-equiangular"

    @property
    def view_increment(self) -> float:
        """Angular step between consecutive views, in degrees."""
        return self.angular_range[1] / self.n_views

    def view_angles(self) -> np.ndarray:
        """View angles in degrees: ``start + i * extent / n_views``."""
        start, extent = self.angular_range
        return start + np.arange(self.n_views) * (extent / self.n_views)

    def detector_positions(self) -> np.ndarray:
        """Detector offsets: lengths (parallel) or fan angles in radians (fan)."""
        k = np.arange(self.n_detectors) - 0.5 * (self.n_detectors - 1)
        if self.is_fan:
            return k * math.radians(self.fan_increment)
        return k * self.detector_spacing

    @property
    def fov_radius(self) -> float:
        """Radius of the disk every view's detector row covers."""
        half = 0.5 * (self.n_detectors - 1)
        if self.is_fan:
            return self.source_to_center * math.sin(math.radians(half * self.fan_increment))
        return half * self.detector_spacing

    def fov_mask(self) -> np.ndarray:
        """1.0 on pixels whose centres lie inside the field of view, else 0.0."""
        n = self.grid_size
        t = (np.arange(n) - 0.5 * (n - 1)) * self.pixel_size
        r2 = t[None, :] ** 2 + t[:, None] ** 2
        return (r2 <= self.fov_radius ** 2).astype(np.float64)

    @property
    def sinogram_shape(self) -> Tuple[int, int]:
        return (self.n_views, self.n_detectors)

    @property
    def image_shape(self) -> Tuple[int, int]:
        return (self.grid_size, self.grid_size)

    def with_views(self, n_views: int, start: float, extent: float) -> "ScanGeometry":
        return replace(self, n_views=int(n_views), angular_range=(float(start), float(extent)))

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angular_range"] = list(self.angular_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        fields = dict(d)
        fields["angular_range"] = tuple(fields["angular_range"])
        return cls(**fields)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScanGeometry":
        return cls.from_dict(json.loads(text))


def parallel_geometry(grid_size: int, n_views: int, n_detectors: Optional[int] = None,
                      pixel_size: float = 1.0, detector_spacing: Optional[float] = None,
                      angular_range: Tuple[float, float] = (0.0, 180.0)) -> ScanGeometry:
    """Parallel-beam geometry whose detector row covers the image diagonal by default."""
    if detector_spacing is None:
        detector_spacing = pixel_size
    if n_detectors is None:
        n_detectors = int(math.ceil(grid_size * math.sqrt(2.0) * pixel_size / detector_spacing)) + 2
    return ScanGeometry("parallel", n_views, angular_range, n_detectors, grid_size,
                        pixel_size=pixel_size, detector_spacing=detector_spacing)


def fan_geometry(grid_size: int, n_views: int, n_detectors: int, pixel_size: float = 1.0,
                 source_to_center: Optional[float] = None, fan_increment: Optional[float] = None,
                 angular_range: Tuple[float, float] = (0.0, 360.0)) -> ScanGeometry:
    """Equiangular fan-beam geometry.

    Defaults place the source at twice the image diagonal and spread the
    detectors so the fan covers the inscribed square with a 2% margin.
    """
    diag = grid_size * pixel_size * math.sqrt(2.0)
    if source_to_center is None:
        source_to_center = 2.0 * diag
    if fan_increment is None:
        half_fan = math.degrees(math.asin(min(1.0, 1.02 * 0.5 * diag / source_to_center)))
        fan_increment = 2.0 * half_fan / (n_detectors - 1)
    return ScanGeometry("fan-equiangular", n_views, angular_range, n_detectors, grid_size,
                        pixel_size=pixel_size, fan_increment=fan_increment,
                        source_to_center=source_to_center)


@dataclass(frozen=True)
class ViewMask:
    """Boolean per-view measurement pattern.

    Rendered as a matrix ``M`` it holds 1 on missing views and 0 on measured
    ones, so the masked blend is ``A mu * M + p * (1 - M)``.
    """

    kept: np.ndarray

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=bool).copy()
        if kept.ndim != 1 or kept.size == 0:
            raise DimensionError(f"mask must be a non-empty 1-D array, got shape {kept.shape}")
        kept.setflags(write=False)
        object.__setattr__(self, "kept", kept)

    @property
    def n_views(self) -> int:
        return self.kept.size

    @property
    def keep_count(self) -> int:
        return int(self.kept.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.kept)

    def matrix(self, n_detectors: int) -> np.ndarray:
        """Missing-data matrix ``M`` of shape (n_views, n_detectors)."""
        col = (~self.kept).astype(np.float64)[:, None]
        return np.broadcast_to(col, (self.n_views, n_detectors)).copy()

    def __eq__(self, other):
        return isinstance(other, ViewMask) and np.array_equal(self.kept, other.kept)

    def __hash__(self):
        return hash(self.kept.tobytes())

    def to_json(self) -> str:
        return json.dumps(self.indices.tolist())

    @classmethod
    def from_indices(cls, indices: Sequence[int], n_views: int) -> "ViewMask":
        kept = np.zeros(n_views, dtype=bool)
        idx = np.asarray(indices, dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= n_views):
            raise DimensionError(f"mask index out of range for {n_views} views")
        kept[idx] = True
        return cls(kept)

    @classmethod
    def from_json(cls, text: str, n_views: int) -> "ViewMask":
        return cls.from_indices(json.loads(text), n_views)

    @classmethod
    def full(cls, n_views: int) -> "ViewMask":
        return cls(np.ones(n_views, dtype=bool))


def make_sparse_mask(geom: ScanGeometry, keep_count: int) -> ViewMask:
    """Keep every ``n_views // keep_count``-th view starting at view 0."""
    if keep_count < 1 or geom.n_views % keep_count != 0:
        raise ConfigurationError(
            f"sparse keep_count={keep_count} must divide n_views={geom.n_views}"
        )
    stride = geom.n_views // keep_count
    kept = np.zeros(geom.n_views, dtype=bool)
    kept[::stride] = True
    return ViewMask(kept)


def make_limited_mask(geom: ScanGeometry, range_deg: float, start_view: int = 0) -> ViewMask:
    """Keep one contiguous arc of ``range_deg`` degrees beginning at ``start_view``."""
    extent = geom.angular_range[1]
    if range_deg > extent + 1e-9:
        raise ConfigurationError(f"limited range {range_deg:g} deg exceeds the scan extent {extent:g} deg")
    count = int(round(range_deg / extent * geom.n_views))
    if count < 1:
        raise ConfigurationError(f"limited range {range_deg:g} deg keeps no views")
    if start_view < 0 or start_view + count > geom.n_views:
        raise ConfigurationError(
            f"limited arc [{start_view}, {start_view + count}) does not fit in {geom.n_views} views"
        )
    kept = np.zeros(geom.n_views, dtype=bool)
    kept[start_view:start_view + count] = True
    return ViewMask(kept)


def compact_geometry(geom: ScanGeometry, mask: ViewMask) -> ScanGeometry:
    """Geometry of the rows kept by ``mask``; they must be uniformly spaced."""
    if mask.n_views != geom.n_views:
        raise DimensionError(f"mask has {mask.n_views} views, geometry has {geom.n_views}")
    idx = mask.indices
    if idx.size == 0:
        raise ConfigurationError("mask keeps no views")
    steps = np.diff(idx)
    stride = int(steps[0]) if steps.size else 1
    if steps.size and np.any(steps != stride):
        raise ConfigurationError("kept views are not uniformly spaced; no compact geometry exists")
    inc = geom.view_increment
    start = geom.angular_range[0] + idx[0] * inc
    return geom.with_views(idx.size, start, idx.size * stride * inc)


def _rows(p):
    # plain ndarrays also expose .data (a memoryview), so test for the wrapper
    return np.asarray(p.data) if hasattr(p, "geom") else np.asarray(p)


def extract_compact(p, mask: ViewMask, geom: Optional[ScanGeometry] = None):
    """Keep only the measured rows of a full-view sinogram.

    Accepts a :class:`~ctml.projector.Sinogram` (geometry taken from it) or a
    raw array plus ``geom``. Returns ``(Sinogram, compact geometry)``.
    """
    from .projector import Sinogram

    if geom is None:
        geom = p.geom
    data = _rows(p)
    if data.shape[-2] != mask.n_views or data.shape[-2] != geom.n_views:
        raise DimensionError(
            f"sinogram has {data.shape[-2]} views, mask {mask.n_views}, geometry {geom.n_views}"
        )
    cgeom = compact_geometry(geom, mask)
    return Sinogram(data[..., mask.indices, :].copy(), cgeom), cgeom


def embed_full(p_compact, mask: ViewMask, geom: ScanGeometry):
    """Place compact rows back on the full view grid; missing rows are zero."""
    from .projector import Sinogram

    data = _rows(p_compact)
    if data.shape[-2] != mask.keep_count:
        raise DimensionError(f"compact sinogram has {data.shape[-2]} rows, mask keeps {mask.keep_count}")
    if mask.n_views != geom.n_views:
        raise DimensionError(f"mask has {mask.n_views} views, geometry has {geom.n_views}")
    out = np.zeros(data.shape[:-2] + (geom.n_views, data.shape[-1]), dtype=data.dtype)
    out[..., mask.indices, :] = data
    return Sinogram(out, geom)
