"""Image and report files.

Detector images are written as 16-bit grayscale PNGs scaled so that the
largest count maps to 65535, with a JSON sidecar (same stem, ``.json``)
holding the raw maximum and the render metadata. ``counts = png / 65535 *
raw_max`` recovers the raw scale to within half a grey level.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .renderer import DetectorImage

FULL_SCALE = 65535


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def config_hash(data) -> str:
    """SHA-256 of the canonical JSON form of a configuration mapping."""
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def provenance(config_data=None, seed: int | None = None) -> dict:
    prov = {"code_version": __version__}
    if config_data is not None:
        prov["config_hash"] = config_hash(config_data)
    if seed is not None:
        prov["seed"] = int(seed)
    return prov


def to_uint16(counts: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale non-negative counts so max -> 65535 and 0 -> 0; returns (raster, raw max)."""
    counts = np.asarray(counts, dtype=np.float64)
    raw_max = float(counts.max()) if counts.size else 0.0
    if raw_max <= 0:
        return np.zeros(counts.shape, np.uint16), raw_max
    return np.rint(counts / raw_max * FULL_SCALE).astype(np.uint16), raw_max


def from_uint16(raster: np.ndarray, raw_max: float) -> np.ndarray:
    return np.asarray(raster, dtype=np.float64) / FULL_SCALE * raw_max


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def write_image(path, image: DetectorImage, prov: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raster, raw_max = to_uint16(image.counts)
    Image.fromarray(raster).save(path)
    meta = {"raw_max": raw_max, "width": image.width, "height": image.height,
            "meta": image.meta, "provenance": prov or provenance()}
    for key in ("n_rays", "seed", "z"):
        if key in image.meta:
            meta[key] = image.meta[key]
    if extra:
        meta.update(extra)
    write_json(sidecar_path(path), meta)
    return path


def read_image(path) -> DetectorImage:
    path = Path(path)
    raster = np.asarray(Image.open(path))
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        counts = from_uint16(raster, meta["raw_max"])
        info = dict(meta.get("meta", {}))
    else:
        counts = raster.astype(np.float64)
        info = {}
    h, w = counts.shape
    return DetectorImage(w, h, counts, info)
