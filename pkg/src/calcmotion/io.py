"""Raw-plus-sidecar file formats.

A volume is a little-endian float32 payload (``<stem>.f32``) next to a JSON
sidecar (``<stem>.json``) holding ``dims``, ``spacing_mm``, ``order`` and
``unit``. Masks use an 8-bit 0/1 payload (``<stem>.u8``) with the same
sidecar shape. Sinogram dumps reuse the float container with
``unit: "line-integral"``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .grid import BinaryMask, VoxelGrid

ORDER = "xyz-row-major"


def _stem(path):
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".f32", ".u8") else p


def _write_sidecar(stem, payload, header):
    header = dict(header, payload=payload.name)
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return stem.with_suffix(".json")


def read_sidecar(path):
    stem = _stem(path)
    try:
        header = json.loads(stem.with_suffix(".json").read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed sidecar {stem.with_suffix('.json')}: {exc}") from exc
    return stem, header


def write_volume(path, grid):
    """Write ``grid`` and return the sidecar path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    payload = stem.with_suffix(".f32")
    payload.write_bytes(grid.values.astype("<f4").tobytes(order="C"))
    return _write_sidecar(stem, payload, {
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing),
        "order": ORDER,
        "unit": grid.unit,
    })


def _load_payload(stem, header, dtype, suffix):
    if header.get("order") != ORDER:
        raise ValidationError(f"unsupported voxel order {header.get('order')!r}")
    dims = tuple(int(d) for d in header["dims"])
    payload = stem.parent / header.get("payload", stem.with_suffix(suffix).name)
    raw = np.frombuffer(payload.read_bytes(), dtype=dtype)
    if raw.size != int(np.prod(dims)):
        raise ValidationError(f"{payload} holds {raw.size} values, header says {dims}")
    return raw.reshape(dims)


def read_volume(path):
    stem, header = read_sidecar(path)
    if header.get("unit") not in ("HU", "normalized"):
        raise ValidationError(f"{stem}: not a volume (unit {header.get('unit')!r})")
    values = _load_payload(stem, header, "<f4", ".f32").astype(np.float64)
    return VoxelGrid(values, tuple(header["spacing_mm"]), header["unit"])


def write_mask(path, mask):
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    payload = stem.with_suffix(".u8")
    payload.write_bytes(mask.bits.astype(np.uint8).tobytes(order="C"))
    return _write_sidecar(stem, payload, {
        "dims": list(mask.dims),
        "spacing_mm": list(mask.spacing),
        "order": ORDER,
        "unit": "mask",
    })


def read_mask(path):
    stem, header = read_sidecar(path)
    if header.get("unit") != "mask":
        raise ValidationError(f"{stem}: not a mask (unit {header.get('unit')!r})")
    bits = _load_payload(stem, header, np.uint8, ".u8")
    return BinaryMask(bits, tuple(header["spacing_mm"]))


def write_sinogram(path, sinos, angles, spacing):
    """Dump a ``(nz, N, B)`` stack of per-slice sinograms."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    payload = stem.with_suffix(".f32")
    sinos = np.asarray(sinos)
    payload.write_bytes(sinos.astype("<f4").tobytes(order="C"))
    return _write_sidecar(stem, payload, {
        "dims": list(sinos.shape),
        "axes": ["slice", "angle", "bin"],
        "bin_spacing_mm": float(spacing),
        "angles_deg": [float(a) for a in angles],
        "order": ORDER,
        "unit": "line-integral",
    })


def read_sinogram(path):
    stem, header = read_sidecar(path)
    if header.get("unit") != "line-integral":
        raise ValidationError(f"{stem}: not a sinogram")
    data = _load_payload(stem, header, "<f4", ".f32").astype(np.float64)
    return data, np.asarray(header["angles_deg"]), header["bin_spacing_mm"]
