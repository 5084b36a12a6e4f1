"""Parallel-beam Radon transform and filtered back-projection, slice by slice.

Projection samples the slice bilinearly on a grid rotated by the view
angle and sums along the ray direction, which is the same thing as
rotating the image by ``-theta`` and summing columns. Detector bins have
the in-plane voxel spacing and there are ``ceil(diagonal)`` of them, so
every pixel of the slice is seen from every angle.

Angles are in degrees. A view at angle ``theta`` integrates along
``(-sin theta, cos theta)`` and its detector axis points along
``(cos theta, sin theta)`` in ``(x, y)`` index space.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import sparse

from .exceptions import ValidationError
from .validation import check_volume

FILTERS = ("ramlak", "hann")


def angle_set(n_angles):
    """``n_angles`` views uniformly spaced over [0, 180) degrees."""
    if n_angles < 1:
        raise ValidationError(f"need at least one angle, got {n_angles}")
    return np.arange(n_angles, dtype=np.float64) * (180.0 / n_angles)


def n_detector_bins(nx, ny):
    return int(math.ceil(math.hypot(nx, ny)))


def _axes(nx, ny):
    B = n_detector_bins(nx, ny)
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    offsets = np.arange(B, dtype=np.float64) - (B - 1) / 2.0
    return B, cx, cy, offsets


def _index_range(offsets, lo, hi):
    i0 = int(np.searchsorted(offsets, lo, side="left"))
    i1 = int(np.searchsorted(offsets, hi, side="right"))
    return max(i0 - 1, 0), min(i1 + 1, offsets.size)


def projection_matrix(nx, ny, theta, s_range=None, u_range=None):
    """Sparse bilinear ray-sum operator for one view.

    Rows are detector bins in ``s_range``; columns index the flattened
    ``(nx, ny)`` slice. Ray samples are one pixel apart along the ray, and
    samples falling outside the slice contribute nothing.
    """
    B, cx, cy, offsets = _axes(nx, ny)
    s_lo, s_hi = s_range or (0, B)
    u_lo, u_hi = u_range or (0, B)
    t = math.radians(theta)
    c, s = math.cos(t), math.sin(t)
    S, U = np.meshgrid(offsets[s_lo:s_hi], offsets[u_lo:u_hi], indexing="ij")
    rows = np.broadcast_to(np.arange(s_hi - s_lo)[:, None], S.shape).ravel()
    X = (cx + S * c - U * s).ravel()
    Y = (cy + S * s + U * c).ravel()
    keep = (X > -1) & (X < nx) & (Y > -1) & (Y < ny)
    X, Y, rows = X[keep], Y[keep], rows[keep]
    x0 = np.floor(X).astype(np.int64)
    y0 = np.floor(Y).astype(np.int64)
    fx, fy = X - x0, Y - y0
    # corners laid out sample-major so entries stay grouped by row
    xi = x0[:, None] + np.array([0, 1, 0, 1])
    yi = y0[:, None] + np.array([0, 0, 1, 1])
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    ok = (xi >= 0) & (xi < nx) & (yi >= 0) & (yi < ny) & (w != 0)
    r = np.broadcast_to(rows[:, None], ok.shape)[ok]
    indptr = np.zeros(s_hi - s_lo + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=s_hi - s_lo), out=indptr[1:])
    # duplicates and unsorted columns are fine for products
    return sparse.csr_matrix((w[ok], xi[ok] * ny + yi[ok], indptr),
                             shape=(s_hi - s_lo, nx * ny))


def project_stack(values, theta, spacing=1.0, region=None):
    """Project every axial slice of ``values`` (nx, ny, nz) at one angle.

    Returns an array of shape ``(nz, B)``. ``region = (lo, hi)`` declares
    that ``values`` is zero outside the index box ``[lo, hi)``; only ray
    samples that can touch the box are evaluated, and the result equals
    the unrestricted projection.
    """
    nx, ny, nz = values.shape
    B, cx, cy, offsets = _axes(nx, ny)
    out = np.zeros((nz, B))
    s_range = u_range = None
    z_lo, z_hi = 0, nz
    if region is not None:
        (x0, y0, z_lo), (x1, y1, z_hi) = region
        if x0 >= x1 or y0 >= y1 or z_lo >= z_hi:
            return out
        t = math.radians(theta)
        c, s = math.cos(t), math.sin(t)
        corners = np.array([[x, y] for x in (x0 - 1, x1) for y in (y0 - 1, y1)], dtype=float)
        dx, dy = corners[:, 0] - cx, corners[:, 1] - cy
        s_range = _index_range(offsets, (dx * c + dy * s).min(), (dx * c + dy * s).max())
        u_range = _index_range(offsets, (-dx * s + dy * c).min(), (-dx * s + dy * c).max())
    op = projection_matrix(nx, ny, theta, s_range, u_range)
    flat = values[:, :, z_lo:z_hi].reshape(nx * ny, z_hi - z_lo)
    lo = 0 if s_range is None else s_range[0]
    out[z_lo:z_hi, lo:lo + op.shape[0]] = (op @ flat).T * spacing
    return out


def radon_project(image, theta, spacing=1.0):
    """Line integrals through a 2-D slice at one angle (length-B row)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError(f"slice must be 2-D, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValidationError("slice contains non-finite values")
    return project_stack(img[:, :, None], theta, spacing)[0]


def radon(image, angles, spacing=1.0):
    """Full sinogram. A 2-D slice gives ``(N, B)``; a stack gives ``(nz, N, B)``."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return np.stack([radon_project(arr, a, spacing) for a in angles])
    arr = check_volume(arr, name="stack")
    rows = [project_stack(arr, a, spacing) for a in angles]
    return np.stack(rows, axis=1)


def ramp_response(n_bins, window="ramlak"):
    """Frequency response of the band-limited ramp filter, zero-padded.

    Built from the spatial Ram-Lak kernel so the DC term is correct.
    """
    if window not in FILTERS:
        raise ValidationError(f"unknown filter {window!r}; choose from {FILTERS}")
    size = max(64, int(2 ** math.ceil(math.log2(2 * n_bins))))
    n = np.concatenate((np.arange(1, size // 2 + 1, 2), np.arange(size // 2 - 1, 0, -2)))
    h = np.zeros(size)
    h[0] = 0.25
    h[1::2] = -1.0 / (np.pi * n) ** 2
    response = 2.0 * np.real(np.fft.fft(h))
    if window == "hann":
        freq = np.fft.fftfreq(size)
        response *= 0.5 * (1.0 + np.cos(2.0 * np.pi * freq))
    return response


def filter_sinogram(sino, window="ramlak"):
    """Ramp-filter each row of an ``(N, B)`` sinogram."""
    N, B = sino.shape
    response = ramp_response(B, window)
    padded = np.zeros((N, response.size))
    padded[:, :B] = sino
    return np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * response, axis=1))[:, :B]


def reconstruction_circle(nx, ny):
    """Boolean mask of the inscribed disc that every view fully covers."""
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    X, Y = np.meshgrid(np.arange(nx) - cx, np.arange(ny) - cy, indexing="ij")
    radius = min(nx, ny) / 2.0
    return X ** 2 + Y ** 2 <= radius ** 2


def fbp(sino, angles, shape, spacing=1.0, window="ramlak", background=0.0):
    """Filtered back-projection of one ``(N, B)`` sinogram onto ``shape``.

    Pixels outside the reconstruction circle are set to ``background``.
    """
    sino = np.asarray(sino, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    if sino.ndim != 2:
        raise ValidationError(f"sinogram must be (N, B), got shape {sino.shape}")
    N, B = sino.shape
    if N < 2:
        raise ValidationError("filtered back-projection needs at least 2 angles")
    if angles.shape != (N,):
        raise ValidationError(f"{angles.size} angles for {N} sinogram rows")
    nx, ny = shape
    if B != n_detector_bins(nx, ny):
        raise ValidationError(f"sinogram has {B} bins, slice {shape} needs {n_detector_bins(nx, ny)}")

    recon = backproject(filter_sinogram(sino / spacing, window)[None], angles, shape)[0]
    inside = reconstruction_circle(nx, ny)
    return np.where(inside, recon, background)


def backproject(filtered, angles, shape):
    """Unfiltered back-projection of ``(nz, N, B)`` rows, scaled by pi/(2N).

    Detector values are linearly interpolated and zero beyond the ends.
    """
    nz, N, B = filtered.shape
    nx, ny = shape
    _, cx, cy, _ = _axes(nx, ny)
    X, Y = np.meshgrid(np.arange(nx) - cx, np.arange(ny) - cy, indexing="ij")
    X, Y = X.ravel(), Y.ravel()
    padded = np.zeros((nz, N, B + 2))
    padded[:, :, 1:-1] = filtered
    recon = np.zeros((nz, nx * ny))
    origin = (B - 1) / 2.0 + 1.0
    for i, theta in enumerate(np.radians(angles)):
        pos = np.clip(X * math.cos(theta) + Y * math.sin(theta) + origin, 0.0, B + 1.0)
        i0 = np.minimum(np.floor(pos).astype(np.int64), B)
        f = pos - i0
        row = padded[:, i]
        recon += row[:, i0] * (1.0 - f) + row[:, i0 + 1] * f
    recon *= math.pi / (2.0 * N)
    return recon.reshape(nz, nx, ny)


def fbp_stack(sinos, angles, shape, spacing=1.0, window="ramlak", background=0.0):
    """Reconstruct a ``(nz, N, B)`` stack into an ``(nx, ny, nz)`` volume."""
    sinos = np.asarray(sinos, dtype=np.float64)
    if sinos.ndim != 3:
        raise ValidationError(f"sinogram stack must be (nz, N, B), got shape {sinos.shape}")
    nz, N, B = sinos.shape
    if N < 2:
        raise ValidationError("filtered back-projection needs at least 2 angles")
    nx, ny = shape
    if B != n_detector_bins(nx, ny):
        raise ValidationError(f"sinogram has {B} bins, slice {shape} needs {n_detector_bins(nx, ny)}")
    filtered = np.stack([filter_sinogram(s / spacing, window) for s in sinos])
    recon = backproject(filtered, np.asarray(angles, dtype=np.float64), shape)
    inside = reconstruction_circle(nx, ny)
    return np.where(inside[:, :, None], np.moveaxis(recon, 0, 2), background)
