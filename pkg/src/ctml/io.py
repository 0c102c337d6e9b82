"""Binary sinogram/image files, the dataset manifest and PNG export.

``.ctsg`` / ``.ctim`` layout::

    magic      4 bytes   b"CTSG" or b"CTIM"
    version    u32 LE
    meta_len   u32 LE
    meta       JSON, utf-8 (shape, geometry or pixel size, extras)
    payload    float32 LE, row-major

Readers validate everything before constructing an object.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import FormatError, TruncatedFileError
from .geometry import ScanGeometry
from .projector import ImageGrid, Sinogram

VERSION = 1
SINO_MAGIC = b"CTSG"
IMAGE_MAGIC = b"CTIM"
_HEADER = struct.Struct("<4sII")


def _write(path, magic: bytes, meta: dict, data: np.ndarray):
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(magic, VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, path)


def _read(path, magic: bytes) -> Tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a header ({len(raw)} bytes)")
    got, version, mlen = _HEADER.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(raw) < _HEADER.size + mlen:
        raise TruncatedFileError(path, mlen, len(raw) - _HEADER.size)
    try:
        meta = json.loads(raw[_HEADER.size:_HEADER.size + mlen].decode("utf-8"))
        shape = tuple(int(s) for s in meta["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable metadata ({exc})") from None
    offset = _HEADER.size + mlen
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    actual = len(raw) - offset
    if actual != expected:
        raise TruncatedFileError(path, expected, actual)
    data = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)
    return meta, data


def write_sinogram(path, sino: Sinogram, extra: Optional[dict] = None):
    meta = {"shape": list(sino.data.shape), "geometry": sino.geom.to_dict()}
    if extra:
        meta["extra"] = extra
    _write(path, SINO_MAGIC, meta, sino.data)


def read_sinogram(path) -> Sinogram:
    meta, data = _read(path, SINO_MAGIC)
    try:
        geom = ScanGeometry.from_dict(meta["geometry"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad geometry metadata ({exc})") from None
    return Sinogram(data, geom)


def write_image(path, img: ImageGrid, extra: Optional[dict] = None):
    meta = {"shape": list(img.data.shape), "pixel_size": float(img.pixel_size)}
    if extra:
        meta["extra"] = extra
    _write(path, IMAGE_MAGIC, meta, img.data)


def read_image(path) -> ImageGrid:
    meta, data = _read(path, IMAGE_MAGIC)
    return ImageGrid(data, float(meta.get("pixel_size", 1.0)))


# -- display -----------------------------------------------------------------

def window_to_bytes(data: np.ndarray, center: float, width: float) -> np.ndarray:
    """Linear window/level mapping to 0..255, clamped."""
    lo = center - width / 2.0
    scaled = (np.asarray(data, dtype=np.float64) - lo) / width * 255.0
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def export_png(path, img, window: Tuple[float, float]):
    """Write an 8-bit grayscale PNG using a (center, width) display window."""
    from PIL import Image

    data = img.data if isinstance(img, ImageGrid) else img
    Image.fromarray(window_to_bytes(data, *window)).save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im)


# -- dataset manifest --------------------------------------------------------

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def write_manifest(directory, content: dict):
    body = {"format": "ctml-dataset", "version": MANIFEST_VERSION}
    body.update(content)
    Path(directory, MANIFEST_NAME).write_text(json.dumps(body, indent=1, sort_keys=True))


def read_manifest(directory) -> dict:
    path = Path(directory, MANIFEST_NAME)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no dataset manifest")
    try:
        body = json.loads(path.read_text())
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if body.get("format") != "ctml-dataset" or body.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: not a version-{MANIFEST_VERSION} dataset manifest")
    if not isinstance(body.get("slices"), list):
        raise FormatError(f"{path}: manifest lists no slices")
    return body
