"""Image quality measures: PSNR, NMSE and SSIM, plus the evaluation report."""

from __future__ import annotations

import csv
import math
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionError, UsageError

REPORT_COLUMNS = ("slice_id", "task", "method", "psnr", "nmse", "ssim")


def _unwrap(x):
    # ImageGrid carries its pixels in .data; ndarray.data is a raw buffer
    return x if isinstance(x, np.ndarray) else getattr(x, "data", x)


def _arrays(x, ref):
    x = np.asarray(_unwrap(x), dtype=np.float64)
    ref = np.asarray(_unwrap(ref), dtype=np.float64)
    if x.shape != ref.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x, ref


def default_range(ref) -> float:
    """Reference max minus min, the data range used throughout."""
    ref = np.asarray(_unwrap(ref))
    return float(ref.max() - ref.min())


def psnr(x, ref, data_range: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    x, ref = _arrays(x, ref)
    if data_range is None:
        data_range = default_range(ref)
    if not data_range > 0:
        raise UsageError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(data_range) - 10.0 * math.log10(mse)


def nmse(x, ref) -> float:
    """``||x - ref||^2 / ||ref||^2``."""
    x, ref = _arrays(x, ref)
    denom = float(np.sum(ref ** 2))
    if denom == 0.0:
        raise UsageError("nmse is undefined for an all-zero reference")
    return float(np.sum((x - ref) ** 2)) / denom


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def ssim_map(x, ref, window_size: int = 11, k1: float = 0.01, k2: float = 0.03,
             data_range: Optional[float] = None, sigma: float = 1.5) -> np.ndarray:
    """Local SSIM over every fully contained window position."""
    x, ref = _arrays(x, ref)
    if data_range is None:
        data_range = default_range(ref)
    if not data_range > 0:
        raise UsageError(f"data_range must be positive, got {data_range}")
    if min(x.shape[-2:]) < window_size:
        raise DimensionError(f"image smaller than the {window_size}-pixel SSIM window")
    g = gaussian_window(window_size, sigma)
    half = window_size // 2

    def blur(a):
        a = correlate1d(a, g, axis=-2, mode="constant")
        a = correlate1d(a, g, axis=-1, mode="constant")
        return a[..., half:a.shape[-2] - (window_size - 1 - half), half:a.shape[-1] - (window_size - 1 - half)]

    mx, my = blur(x), blur(ref)
    sxx = blur(x * x) - mx * mx
    syy = blur(ref * ref) - my * my
    sxy = blur(x * ref) - mx * my
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(x, ref, window_size: int = 11, k1: float = 0.01, k2: float = 0.03,
         data_range: Optional[float] = None) -> float:
    """Mean structural similarity with an 11-tap, sigma 1.5 Gaussian window."""
    return float(np.mean(ssim_map(x, ref, window_size, k1, k2, data_range)))


def evaluate(x, ref, data_range: Optional[float] = None) -> dict:
    if data_range is None:
        data_range = default_range(ref)
    return {"psnr": psnr(x, ref, data_range), "nmse": nmse(x, ref), "ssim": ssim(x, ref, data_range=data_range)}


def summarize(rows: Iterable[dict]) -> List[dict]:
    """Mean and standard deviation per (task, method)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["task"], r["method"]), []).append(r)
    out = []
    for (task, method), rs in groups.items():
        entry = {"slice_id": "mean±std", "task": task, "method": method, "n": len(rs)}
        for key in ("psnr", "nmse", "ssim"):
            v = np.array([r[key] for r in rs], dtype=np.float64)
            if np.all(v == v[0]):
                entry[key] = (float(v[0]), 0.0)  # also keeps an all-inf column finite in std
            else:
                entry[key] = (float(v.mean()), float(v.std()))
        out.append(entry)
    return out


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return f"{_fmt(v[0])}±{_fmt(v[1])}"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6g}"
    return str(v)


def write_report(path, rows: Sequence[dict]):
    """Per-slice rows followed by one ``mean±std`` row per (task, method)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
        for s in summarize(rows):
            w.writerow([_fmt(s[c]) for c in REPORT_COLUMNS])


def read_report(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
