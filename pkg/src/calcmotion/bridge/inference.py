"""2.5-D sliding-window correction of a normalized ROI."""

from __future__ import annotations

import numpy as np

from ..exceptions import ValidationError
from ..grid import VoxelGrid, extract_context_windows
from ..validation import check_odd, check_rng
from .schedule import sample


def roi_windows(values, k):
    """All stride-1 context windows of an ``(H, W, nz)`` array, stacked."""
    nx, ny, _ = values.shape
    return np.stack([w.values for w in extract_context_windows(values, nx, ny, k)])


def sliding_window_correct(roi, denoiser, sched, k=3, mode="posterior", rng=None,
                           stochastic=False, batch_size=None):
    """Correct every axial slice from its own k-slice window.

    Each window is run through the reverse sampler and only its central
    slice is kept. Windows are processed ``batch_size`` at a time (all at
    once by default). Output is clipped to [0, 1]. Returns
    ``(corrected, traces)`` with the same type as ``roi``.
    """
    k = check_odd(k, "k")
    values = roi.values if isinstance(roi, VoxelGrid) else np.asarray(roi, dtype=np.float64)
    if values.ndim != 3 or values.shape[2] < 1:
        raise ValidationError(f"ROI must be (H, W, nz), got shape {values.shape}")
    rng = check_rng(rng)
    windows = roi_windows(values, k)
    n = len(windows)
    size = n if batch_size is None else int(batch_size)
    out = np.empty_like(values)
    traces = []
    for start in range(0, n, size):
        x0_hat, trace = sample(windows[start:start + size], denoiser, sched, mode, rng, stochastic,
                               keep_states=False)
        out[:, :, start:start + size] = np.moveaxis(x0_hat[..., k // 2], 0, 2)
        traces.append(trace)
    out = np.clip(out, 0.0, 1.0)
    if isinstance(roi, VoxelGrid):
        return roi.with_values(out, unit="normalized"), traces
    return out, traces
