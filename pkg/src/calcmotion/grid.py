"""Volumetric data model: HU grids, calcium masks and the operations on them.

Arrays are indexed ``[x, y, z]`` (C order, z fastest), so an axial slice
is ``values[:, :, k]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import DomainError, ValidationError
from .validation import (
    check_mask,
    check_odd,
    check_positive_int,
    check_rng,
    check_same_geometry,
    check_spacing,
    check_volume,
)

HU_MIN = -200.0
HU_MAX = 800.0
HU_RANGE = HU_MAX - HU_MIN


@dataclass
class VoxelGrid:
    """A 3-D scalar field with physical voxel spacing in millimetres.

    ``unit`` is ``"HU"`` for Hounsfield data and ``"normalized"`` for the
    [0, 1] representation fed to the denoiser.
    """

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    unit: str = "HU"

    def __post_init__(self):
        self.values = check_volume(self.values, name="VoxelGrid values")
        self.spacing = check_spacing(self.spacing)
        if self.unit not in ("HU", "normalized"):
            raise ValidationError(f"unknown unit {self.unit!r}")

    @property
    def dims(self):
        return tuple(int(s) for s in self.values.shape)

    @property
    def voxel_volume(self):
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_values(self, values, unit=None):
        return VoxelGrid(values, self.spacing, unit or self.unit)

    def copy(self):
        return VoxelGrid(self.values.copy(), self.spacing, self.unit)


@dataclass
class BinaryMask:
    bits: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.bits = check_mask(self.bits)
        if self.bits.ndim != 3:
            raise ValidationError(f"mask must be 3-D, got shape {self.bits.shape}")
        self.spacing = check_spacing(self.spacing)

    @property
    def dims(self):
        return tuple(int(s) for s in self.bits.shape)

    def any(self):
        return bool(self.bits.any())


@dataclass
class ContextWindow:
    """k adjacent axial slices centred on slice ``center``."""

    center: int
    values: np.ndarray  # (H, W, k)


@dataclass
class ROI:
    origin: tuple
    grid: VoxelGrid
    mask: BinaryMask
    kind: str  # "calcium" or "background"
    component: int | None = None
    meta: dict = field(default_factory=dict)


def _values_of(v):
    return v.values if isinstance(v, VoxelGrid) else np.asarray(v, dtype=np.float64)


def normalize(v):
    """Clip to [-200, 800] HU and map affinely onto [0, 1].

    Accepts a :class:`VoxelGrid` (returns one tagged ``"normalized"``) or a
    plain array.
    """
    out = (np.clip(_values_of(v), HU_MIN, HU_MAX) - HU_MIN) / HU_RANGE
    if isinstance(v, VoxelGrid):
        return v.with_values(out, unit="normalized")
    return out


def hu_from_normalized(n):
    """The affine inverse of :func:`normalize` without a domain check.

    Used on network outputs, which may stray slightly outside [0, 1].
    """
    return HU_RANGE * np.asarray(n, dtype=np.float64) + HU_MIN


def denormalize(n):
    vals = _values_of(n)
    if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
        raise DomainError(
            f"normalized values must lie in [0, 1], got [{vals.min()}, {vals.max()}]"
        )
    out = hu_from_normalized(vals)
    if isinstance(n, VoxelGrid):
        return n.with_values(out, unit="HU")
    return out


def _component_labels(bits):
    labels, count = ndimage.label(bits, structure=np.ones((3, 3, 3), dtype=bool))
    return labels, count


def extract_rois(v, m, rng=None, *, block=(64, 64, 16), jitter=8, n_background=1,
                 max_tries=200):
    """Cut calcium-centred and background-only blocks out of a volume.

    One calcium block is produced per connected component of ``m``, centred
    on its centroid plus an in-plane offset drawn from
    ``[-jitter, jitter]``; blocks are clamped to the volume. Background
    blocks contain no mask voxel and are skipped when none can be found.
    """
    check_same_geometry(v, m, "volume and mask")
    rng = check_rng(rng)
    block = tuple(check_positive_int(b, "block size") for b in block)
    if any(d < b for d, b in zip(v.dims, block)):
        raise ValidationError(f"volume {v.dims} is smaller than the ROI block {block}")
    hi = [d - b for d, b in zip(v.dims, block)]

    def cut(origin, kind, comp=None):
        sl = tuple(slice(o, o + b) for o, b in zip(origin, block))
        return ROI(
            origin=tuple(int(o) for o in origin),
            grid=VoxelGrid(v.values[sl], v.spacing, v.unit),
            mask=BinaryMask(m.bits[sl], m.spacing),
            kind=kind,
            component=comp,
        )

    rois = []
    labels, count = _component_labels(m.bits)
    for comp in range(1, count + 1):
        centroid = np.array(ndimage.center_of_mass(labels == comp))
        for attempt in range(2):
            center = np.rint(centroid).astype(int)
            if attempt == 0 and jitter > 0:
                center[:2] += rng.integers(-jitter, jitter + 1, size=2)
            origin = np.clip(center - np.array(block) // 2, 0, hi)
            sl = tuple(slice(o, o + b) for o, b in zip(origin, block))
            if (labels[sl] == comp).any():
                break
        rois.append(cut(origin, "calcium", comp))

    for _ in range(n_background):
        for _ in range(max_tries):
            origin = np.array([rng.integers(0, h + 1) for h in hi])
            sl = tuple(slice(o, o + b) for o, b in zip(origin, block))
            if not m.bits[sl].any():
                rois.append(cut(origin, "background"))
                break
    return rois


def context_indices(nz, center, k):
    half = k // 2
    return np.clip(np.arange(center - half, center + half + 1), 0, nz - 1)


def extract_context_windows(v, H, W, k, stride=1):
    """2.5-D windows of ``k`` slices centred every ``stride`` slices.

    Edge slices are replicated, so there are ``ceil(nz / stride)`` windows
    whatever the depth.
    """
    k = check_odd(k, "k")
    stride = check_positive_int(stride, "stride")
    vals = _values_of(v)
    nx, ny, nz = vals.shape
    if (H, W) != (nx, ny):
        raise ValidationError(f"window in-plane size {(H, W)} does not match ROI {(nx, ny)}")
    return [
        ContextWindow(c, vals[:, :, context_indices(nz, c, k)])
        for c in range(0, nz, stride)
    ]


def stack_windows(windows, nz=None):
    """Inverse of :func:`extract_context_windows` for stride 1: central slices."""
    k = windows[0].values.shape[2]
    out = np.stack([w.values[:, :, k // 2] for w in windows], axis=2)
    if nz is not None and out.shape[2] != nz:
        raise ValidationError(f"stacked depth {out.shape[2]} != {nz}")
    return out


def _bbox(bits, pad, shape):
    idx = np.nonzero(bits)
    lo = [max(int(i.min()) - p, 0) for i, p in zip(idx, pad)]
    hi = [min(int(i.max()) + p + 1, s) for i, p, s in zip(idx, pad, shape)]
    return lo, hi


def _sample_shifted(arr, d, box, src, mode):
    """Trilinear samples of ``arr`` at ``x - d`` for every index ``x`` in ``box``,
    reading only the source crop ``src``."""
    (lo, hi), (src_lo, src_hi) = box, src
    crop = tuple(slice(a, b) for a, b in zip(src_lo, src_hi))
    grids = np.meshgrid(*[np.arange(a, b, dtype=np.float64) for a, b in zip(lo, hi)], indexing="ij")
    coords = np.stack([g - s - o for g, s, o in zip(grids, d, src_lo)])
    return ndimage.map_coordinates(arr[crop], coords, order=1, mode=mode, cval=0.0)


def translate(values, d):
    """Trilinear translation of a whole array by ``d`` voxels, zero outside.

    This is the transport used by :func:`shift_region` before compositing;
    it conserves the total of any field that stays inside the array.
    """
    values = check_volume(values, name="values")
    d = np.asarray(d, dtype=np.float64)
    full = ([0, 0, 0], list(values.shape))
    return _sample_shifted(values, d, full, full, "grid-constant")


def shift_region(v, m, d, background=None):
    """Move the voxels under ``m`` by ``d = (dx, dy, dz)`` voxels.

    Values are resampled trilinearly from ``v`` and pasted wherever the
    trilinearly shifted mask is at least 0.5; every other voxel comes from
    ``background`` (``v`` itself when omitted). Contributions that leave the
    volume are dropped.
    """
    check_same_geometry(v, m, "volume and mask")
    base = v if background is None else background
    check_same_geometry(v, base, "volume and background")
    out = base.values.copy()
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (3,) or not np.all(np.isfinite(d)):
        raise ValidationError(f"displacement must be 3 finite numbers, got {d}")
    if not m.bits.any():
        return base.with_values(out)

    idx = np.nonzero(m.bits)
    lo = [int(math.floor(i.min() + s)) for i, s in zip(idx, d)]
    hi = [int(math.ceil(i.max() + s)) + 1 for i, s in zip(idx, d)]
    lo = [max(a, 0) for a in lo]
    hi = [min(b, n) for b, n in zip(hi, v.dims)]
    if any(a >= b for a, b in zip(lo, hi)):
        return base.with_values(out)

    # resample from a crop around the lesion; points outside it have mask < 0.5
    src_lo = [max(int(i.min()) - 2, 0) for i in idx]
    src_hi = [min(int(i.max()) + 3, n) for i, n in zip(idx, v.dims)]
    frac = _sample_shifted(m.bits.astype(np.float64), d, (lo, hi), (src_lo, src_hi), "grid-constant")
    vals = _sample_shifted(v.values, d, (lo, hi), (src_lo, src_hi), "nearest")
    region = tuple(slice(a, b) for a, b in zip(lo, hi))
    sub = out[region]
    inside = frac >= 0.5
    sub[inside] = vals[inside]
    return base.with_values(out)


def _neighbour_sum(a, valid):
    """Sum and count of valid 6-neighbours for every voxel of ``a``."""
    total = np.zeros_like(a)
    count = np.zeros_like(a)
    for ax in range(3):
        for step in (1, -1):
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if step == 1:
                src[ax], dst[ax] = slice(1, None), slice(None, -1)
            else:
                src[ax], dst[ax] = slice(None, -1), slice(1, None)
            src, dst = tuple(src), tuple(dst)
            total[dst] += np.where(valid[src], a[src], 0.0)
            count[dst] += valid[src]
    return total, count


def inpaint(v, m, *, tol=0.1, max_iter=500):
    """Fill masked voxels by repeated 6-neighbour averaging.

    Masked voxels start at the mean of the unmasked voxels bordering the
    mask and are relaxed (Jacobi) until the largest per-iteration change
    drops below ``tol`` HU or ``max_iter`` sweeps have run. Unmasked voxels
    are returned untouched, and by the discrete maximum principle the fill
    stays within the range of the bordering ring.
    """
    check_same_geometry(v, m, "volume and mask")
    bits = m.bits
    if not bits.any():
        return v.copy()
    if bits.all():
        raise ValidationError("mask covers the entire volume; nothing to inpaint from")

    lo, hi = _bbox(bits, (1, 1, 1), v.dims)
    region = tuple(slice(a, b) for a, b in zip(lo, hi))
    a = v.values[region].copy()
    hole = bits[region]
    known = ~hole

    ring = known & ndimage.binary_dilation(hole, structure=ndimage.generate_binary_structure(3, 1))
    a[hole] = float(a[ring].mean())

    everything = np.ones_like(hole)
    for _ in range(max_iter):
        total, count = _neighbour_sum(a, everything)
        new = total[hole] / count[hole]
        change = np.max(np.abs(new - a[hole]))
        a[hole] = new
        if change < tol:
            break

    out = v.values.copy()
    out[region] = np.where(hole, a, out[region])
    return v.with_values(out)
