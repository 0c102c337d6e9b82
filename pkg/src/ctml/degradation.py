"""Low-dose noise simulation and construction of the three task datasets.

Noise is injected once into the full-view sinogram; the sparse-view and
limited-view sinograms are row subsets of that same noisy sinogram, so all
three tasks see one noise realisation.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from . import io
from .errors import ConfigurationError, InputError
from .geometry import (ScanGeometry, ViewMask, embed_full, extract_compact, make_limited_mask,
                       make_sparse_mask)
from .projector import DEFAULT_WINDOW, ImageGrid, Sinogram, fbp, forward_project

log = logging.getLogger(__name__)

DEFAULT_I0 = 1e5


@dataclass(frozen=True)
class DoseConfig:
    """Incident photons per bin at full dose and the simulated dose fraction."""

    I0: float = DEFAULT_I0
    dose_fraction: float = 0.25

    def __post_init__(self):
        if not self.I0 > 0:
            raise ConfigurationError(f"I0 must be positive, got {self.I0}")
        if not 0 < self.dose_fraction <= 1:
            raise ConfigurationError(f"dose fraction must lie in (0, 1], got {self.dose_fraction}")


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def inject_low_dose(p_clean: Sinogram, I0: float, dose_fraction: float, seed,
                    return_floor_count: bool = False):
    """Poisson transmission noise followed by the log transform.

    Counts ``N ~ Poisson(dose_fraction * I0 * exp(-p))`` are floored at one
    photon before ``-log(N / (dose_fraction * I0))``.

    Parameters
    ----------
    p_clean : Sinogram
        Noise-free line integrals, all >= 0.
    I0, dose_fraction : float
        Full-dose photons per bin and the dose multiplier in (0, 1].
    seed : int or sequence of int
        Seed for ``numpy.random.default_rng``.
    return_floor_count : bool
        Also return the number of bins hit by the one-photon floor.
    """
    DoseConfig(I0, dose_fraction)
    p = np.asarray(p_clean.data, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise InputError("line integrals contain non-finite values")
    if np.any(p < 0):
        raise InputError(f"line integrals must be non-negative (min {p.min():.3g})")
    blank = dose_fraction * I0
    counts = _rng(seed).poisson(blank * np.exp(-p)).astype(np.float64)
    floored = int(np.count_nonzero(counts < 1))
    if floored:
        log.warning("photon starvation: %d bins floored at one count", floored)
    noisy = Sinogram(-np.log(np.maximum(counts, 1.0) / blank), p_clean.geom)
    return (noisy, floored) if return_floor_count else noisy


@dataclass
class TaskTriplet:
    """Sinograms and FBP images of the three tasks for one slice.

    ``p_sv`` and ``p_lv`` are compact (measured rows only) and carry their
    own geometries; images are reconstructed under those geometries.
    """

    p_ld: Sinogram
    mu_ld: ImageGrid
    p_sv: Sinogram
    mu_sv: ImageGrid
    p_lv: Sinogram
    mu_lv: ImageGrid
    masks: Tuple[ViewMask, ViewMask]
    slice_id: Union[int, str] = 0
    floored_bins: int = 0

    def sinogram(self, task: str) -> Sinogram:
        return {"fvct": self.p_ld, "svct": self.p_sv, "lvct": self.p_lv}[task]

    def image(self, task: str) -> ImageGrid:
        return {"fvct": self.mu_ld, "svct": self.mu_sv, "lvct": self.mu_lv}[task]

    def embedded(self, task: str) -> np.ndarray:
        """Task sinogram on the full view grid, zeros on missing views."""
        if task == "fvct":
            return self.p_ld.data
        mask = self.masks[0] if task == "svct" else self.masks[1]
        return embed_full(self.sinogram(task), mask, self.p_ld.geom).data


def build_triplet(p_clean: Sinogram, geom: Optional[ScanGeometry] = None, dose: DoseConfig = DoseConfig(),
                  sv_keep: int = 36, lv_range: float = 120.0, seed=0, slice_id: Union[int, str] = 0,
                  window: str = DEFAULT_WINDOW, lv_start: int = 0) -> TaskTriplet:
    """Noisy full-view sinogram plus its sparse and limited extractions."""
    geom = geom or p_clean.geom
    m_sv = make_sparse_mask(geom, sv_keep)
    m_lv = make_limited_mask(geom, lv_range, lv_start)
    p_ld, floored = inject_low_dose(Sinogram(p_clean.data, geom), dose.I0, dose.dose_fraction, seed,
                                    return_floor_count=True)
    p_sv, _ = extract_compact(p_ld, m_sv)
    p_lv, _ = extract_compact(p_ld, m_lv)
    return TaskTriplet(
        p_ld=p_ld, mu_ld=fbp(p_ld, window=window),
        p_sv=p_sv, mu_sv=fbp(p_sv, window=window),
        p_lv=p_lv, mu_lv=fbp(p_lv, window=window),
        masks=(m_sv, m_lv), slice_id=slice_id, floored_bins=floored,
    )


# -- dataset directories -----------------------------------------------------

SLICE_FILES = ("ld.ctsg", "sv.ctsg", "lv.ctsg", "ld.ctim", "sv.ctim", "lv.ctim", "meta.json")
MANIFEST = "manifest.json"
_PREFIX = {"fvct": "ld", "svct": "sv", "lvct": "lv"}


@dataclass(frozen=True)
class SimulationConfig:
    """Toy simulation settings; defaults give the 64 px benchmark dataset.

    ``pixel_size`` 0.1 puts line integrals in the clinical range (up to about
    6), ``edge_sigma`` softens phantom edges so the Ram-Lak FBP baseline is
    limited by noise and missing views rather than by grid resolution.
    """

    phantoms: int = 32
    size: int = 64
    views: int = 288
    detectors: int = 64
    dose: float = 0.25
    sparse_keep: int = 36
    limited_deg: float = 120.0
    seed: int = 0
    I0: float = DEFAULT_I0
    pixel_size: float = 0.1
    ellipses: int = 8
    supersample: int = 4
    edge_sigma: float = 1.0
    beam: str = "fan-equiangular"
    window: str = "ram-lak"

    def geometry(self) -> ScanGeometry:
        from .geometry import fan_geometry, parallel_geometry

        if self.beam == "parallel":
            return parallel_geometry(self.size, self.views, self.detectors, pixel_size=self.pixel_size,
                                     detector_spacing=self.size * self.pixel_size * 1.02 / self.detectors,
                                     angular_range=(0.0, 360.0))
        if self.beam != "fan-equiangular":
            raise ConfigurationError(f"unknown beam mode {self.beam!r}")
        # fan covers the inscribed disk (phantom support) with a small margin
        radius = 0.5 * self.size * self.pixel_size
        src = 2.0 * np.sqrt(2.0) * self.size * self.pixel_size
        half = np.degrees(np.arcsin(1.02 * radius / src))
        return fan_geometry(self.size, self.views, self.detectors, pixel_size=self.pixel_size,
                            source_to_center=src, fan_increment=2 * half / (self.detectors - 1))

    def validate(self) -> ScanGeometry:
        """Check every parameter and build the masks without touching disk."""
        if self.phantoms < 1:
            raise ConfigurationError("need at least one phantom")
        if self.size < 8:
            raise ConfigurationError(f"image size {self.size} too small")
        if self.views < 1 or self.detectors < 2:
            raise ConfigurationError("need at least one view and two detectors")
        DoseConfig(self.I0, self.dose)
        geom = self.geometry()
        make_sparse_mask(geom, self.sparse_keep)
        make_limited_mask(geom, self.limited_deg)
        return geom


def simulate_slice(cfg: SimulationConfig, index: int, geom: Optional[ScanGeometry] = None):
    """Phantom and task triplet for slice ``index``; RNG streams come from (seed, index)."""
    from .phantoms import random_ellipse_phantom

    geom = geom or cfg.geometry()
    phantom = random_ellipse_phantom(cfg.size, cfg.ellipses, [cfg.seed, index, 0], cfg.pixel_size,
                                     cfg.supersample, cfg.edge_sigma)
    clean = forward_project(phantom, geom)
    trip = build_triplet(clean, geom, DoseConfig(cfg.I0, cfg.dose), cfg.sparse_keep, cfg.limited_deg,
                         seed=[cfg.seed, index, 1], slice_id=index, window=cfg.window)
    return phantom, trip


def write_slice(directory, trip: TaskTriplet, phantom: Optional[ImageGrid] = None, extra: Optional[dict] = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for task, pre in _PREFIX.items():
        io.write_sinogram(d / f"{pre}.ctsg", trip.sinogram(task))
        io.write_image(d / f"{pre}.ctim", trip.image(task))
    if phantom is not None:
        io.write_image(d / "phantom.ctim", phantom)
    meta = {
        "slice_id": trip.slice_id,
        "geometry": trip.p_ld.geom.to_dict(),
        "sv_mask": trip.masks[0].indices.tolist(),
        "lv_mask": trip.masks[1].indices.tolist(),
        "floored_bins": trip.floored_bins,
    }
    meta.update(extra or {})
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_slice(directory) -> Tuple[TaskTriplet, Optional[ImageGrid]]:
    """Load a slice directory; the phantom is ``None`` when absent."""
    d = Path(directory)
    missing = [f for f in SLICE_FILES if not (d / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
    try:
        meta = json.loads((d / "meta.json").read_text())
        n_views = int(meta["geometry"]["n_views"])
        masks = (ViewMask.from_indices(meta["sv_mask"], n_views), ViewMask.from_indices(meta["lv_mask"], n_views))
    except (ValueError, KeyError, TypeError) as exc:
        from .errors import FormatError

        raise FormatError(f"{d / 'meta.json'}: {exc}") from None
    sino = {t: io.read_sinogram(d / f"{p}.ctsg") for t, p in _PREFIX.items()}
    img = {t: io.read_image(d / f"{p}.ctim") for t, p in _PREFIX.items()}
    phantom = io.read_image(d / "phantom.ctim") if (d / "phantom.ctim").is_file() else None
    trip = TaskTriplet(sino["fvct"], img["fvct"], sino["svct"], img["svct"], sino["lvct"], img["lvct"],
                       masks, meta.get("slice_id", d.name), int(meta.get("floored_bins", 0)))
    return trip, phantom


def build_dataset(out_dir, cfg: SimulationConfig, indices: Optional[Sequence[int]] = None) -> Path:
    """Write one slice directory per phantom plus ``manifest.json``.

    Everything is validated before the output directory is created, and the
    dataset is assembled in a temporary sibling that is renamed on success.
    """
    geom = cfg.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise ConfigurationError(f"output directory {out} exists and is not empty")
    indices = list(range(cfg.phantoms)) if indices is None else list(indices)
    tmp = out.with_name(out.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        names = []
        for idx in indices:
            phantom, trip = simulate_slice(cfg, idx, geom)
            name = f"slice_{idx:04d}"
            write_slice(tmp / name, trip, phantom, {"dose": cfg.dose, "I0": cfg.I0, "seed": cfg.seed})
            names.append(name)
        io.write_manifest(tmp, {"config": asdict(cfg), "geometry": geom.to_dict(), "slices": names})
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        out.rmdir()
    tmp.rename(out)
    return out
