"""Lesion trajectories: four motion families and the preset catalogue.

A trajectory holds one displacement ``(dx, dy, dz)`` in voxels per
projection angle. Time enters through the normalised phase ``i / N``, so
the same profile sampled with more angles is simply a finer sampling of
the same motion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from .exceptions import ValidationError
from .tomo import angle_set
from .validation import check_positive_int

FAMILIES = ("translation", "oscillation", "jitter", "piecewise")
ALLOWED_N = (180, 360, 540, 720, 1080)


@dataclass(frozen=True)
class MotionProfileSpec:
    """Functional form (``family``) plus its parameters.

    ``signs`` orients translation and oscillation along a fixed 3-D
    direction. Jitter uses ``jitter_weights`` and the unit vectors
    ``jitter_dirs``. Piecewise motion uses two segments with amplitudes
    ``segment_amplitudes`` and unit directions ``segment_dirs``; the first
    ramp ends at ``breakpoint_frac * N`` and is followed by a dwell of
    ``dwell_frac * N`` steps.
    """

    family: str
    amplitude: float
    phase: float = 0.0
    ratios: tuple = (1.0, 1.0, 1.0)
    signs: tuple = (1.0, 1.0, 1.0)
    jitter_weights: tuple = (1.0, 0.0, 0.0)
    jitter_dirs: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    segment_amplitudes: tuple = (1.0, 1.0)
    segment_dirs: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))
    breakpoint_frac: float = 0.4
    dwell_frac: float = 0.1
    preset: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown motion family {self.family!r}")
        if not (math.isfinite(self.amplitude) and self.amplitude >= 0):
            raise ValidationError(f"amplitude must be >= 0, got {self.amplitude}")

    def to_dict(self):
        return {
            "family": self.family,
            "amplitude": self.amplitude,
            "phase": self.phase,
            "ratios": list(self.ratios),
            "signs": list(self.signs),
            "jitter_weights": list(self.jitter_weights),
            "jitter_dirs": [list(u) for u in self.jitter_dirs],
            "segment_amplitudes": list(self.segment_amplitudes),
            "segment_dirs": [list(u) for u in self.segment_dirs],
            "breakpoint_frac": self.breakpoint_frac,
            "dwell_frac": self.dwell_frac,
            "preset": self.preset,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("ratios", "signs", "jitter_weights", "segment_amplitudes"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        for key in ("jitter_dirs", "segment_dirs"):
            if key in d:
                d[key] = tuple(tuple(float(x) for x in u) for u in d[key])
        return cls(**d)

    def with_amplitude(self, amplitude):
        return replace(self, amplitude=float(amplitude))


@dataclass
class Trajectory:
    displacements: np.ndarray  # (N, 3) voxels
    angles: np.ndarray  # (N,) degrees
    spec: MotionProfileSpec | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.displacements)

    @property
    def norms(self):
        return np.linalg.norm(self.displacements, axis=1)

    def to_dict(self):
        return {
            "spec": None if self.spec is None else self.spec.to_dict(),
            "angles_deg": self.angles.tolist(),
            "displacements_vox": self.displacements.tolist(),
        }


def axis_amplitudes(A, rx, ry, rz):
    """Scale ratios so the dominant axis moves by exactly ``A``."""
    vals = (A, rx, ry, rz)
    if not all(math.isfinite(v) and v > 0 for v in vals):
        raise ValidationError(f"amplitude and ratios must be positive, got {vals}")
    top = max(rx, ry, rz)
    return (A * rx / top, A * ry / top, A * rz / top)


def _check_n(N):
    return check_positive_int(N, "number of angles")


def _directed_amplitudes(spec):
    if spec.amplitude == 0:
        return np.zeros(3)
    return np.asarray(axis_amplitudes(spec.amplitude, *spec.ratios)) * np.sign(spec.signs)


def _trajectory(spec, disp):
    return Trajectory(np.asarray(disp, dtype=np.float64), angle_set(len(disp)), spec)


def gen_translation(spec, N):
    N = _check_n(N)
    velocity = _directed_amplitudes(spec) / N
    return _trajectory(spec, np.arange(N)[:, None] * velocity[None, :])


def gen_oscillation(spec, N):
    N = _check_n(N)
    phase = 2.0 * np.pi * np.arange(N) / N + spec.phase
    return _trajectory(spec, np.cos(phase)[:, None] * _directed_amplitudes(spec)[None, :])


def gen_jitter(spec, N):
    """Sum of three harmonics along random directions, rescaled so the
    largest sampled displacement has norm exactly ``A``."""
    N = _check_n(N)
    w = np.asarray(spec.jitter_weights, dtype=np.float64)
    if not np.any(w):
        raise ValidationError("jitter needs at least one non-zero weight")
    u = np.asarray(spec.jitter_dirs, dtype=np.float64)
    norms = np.linalg.norm(u, axis=1)
    if u.shape != (3, 3) or not np.allclose(norms, 1.0):
        raise ValidationError("jitter directions must be three unit vectors")
    t = np.arange(N) / N
    k = np.arange(1, 4)
    basis = np.sin(2.0 * np.pi * np.outer(t, k) + spec.phase) * w[None, :]
    raw = basis @ u
    peak = np.linalg.norm(raw, axis=1).max()
    if spec.amplitude == 0 or peak == 0:
        return _trajectory(spec, np.zeros((N, 3)))
    return _trajectory(spec, raw * (spec.amplitude / peak))


def piecewise_breakpoints(spec, N):
    b1 = int(round(spec.breakpoint_frac * N))
    dwell = max(1, int(round(spec.dwell_frac * N)))
    if not (0 < b1 < b1 + dwell < N):
        raise ValidationError(
            f"invalid piecewise breakpoints for N={N}: ramp end {b1}, dwell {dwell}"
        )
    return b1, dwell


def gen_piecewise(spec, N):
    """Ramp to ``A1 u1``, dwell, then ramp on by ``A2 u2`` to the last step."""
    N = _check_n(N)
    b1, dwell = piecewise_breakpoints(spec, N)
    u = np.asarray(spec.segment_dirs, dtype=np.float64)
    if u.shape != (2, 3) or not np.allclose(np.linalg.norm(u, axis=1), 1.0):
        raise ValidationError("piecewise directions must be two unit vectors")
    first = spec.segment_amplitudes[0] * u[0]
    second = spec.segment_amplitudes[1] * u[1]
    i = np.arange(N, dtype=np.float64)
    last_dwell = b1 + dwell - 1
    ramp1 = np.clip(i / b1, 0.0, 1.0)
    ramp2 = np.clip((i - last_dwell) / (N - 1 - last_dwell), 0.0, 1.0)
    disp = ramp1[:, None] * first[None, :] + ramp2[:, None] * second[None, :]
    return _trajectory(spec, disp)


_GENERATORS = {
    "translation": gen_translation,
    "oscillation": gen_oscillation,
    "jitter": gen_jitter,
    "piecewise": gen_piecewise,
}


def generate(spec, N):
    return _GENERATORS[spec.family](spec, N)


@lru_cache(maxsize=1)
def _catalog_json():
    text = resources.files("calcmotion").joinpath("data/presets.json").read_text()
    return json.loads(text)


def preset_catalog():
    """The 21 named presets as ``{name: PresetSampler}`` in catalogue order."""
    cat = _catalog_json()
    return {
        p["name"]: PresetSampler(index=i, ranges=cat["ranges"], **p)
        for i, p in enumerate(cat["presets"])
    }


def _unit(v):
    return tuple(float(x) for x in v / np.linalg.norm(v))


@dataclass(frozen=True)
class PresetSampler:
    """Draws randomised parameters for one named preset."""

    name: str
    family: str
    dominant: str
    amplitude: tuple
    index: int
    ranges: dict

    def _ratios(self, rng):
        lo_d, hi_d = self.ranges["dominant_ratio"]
        lo_m, hi_m = self.ranges["minor_ratio"]
        major = lambda: rng.uniform(lo_d, hi_d)  # noqa: E731
        minor = lambda: rng.uniform(lo_m, hi_m)  # noqa: E731
        if self.dominant == "x":
            rx, ry = major(), minor()
        elif self.dominant == "y":
            rx, ry = minor(), major()
        else:
            rx, ry = major(), major()
        rz = rng.uniform(*self.ranges["axial_ratio"])
        return (rx, ry, rz)

    def sample(self, seed):
        rng = np.random.default_rng([int(seed), self.index])
        A = float(rng.uniform(*self.amplitude))
        phase = float(rng.uniform(*self.ranges["phase"]))
        ratios = self._ratios(rng)
        signs = tuple(float(s) for s in rng.choice([-1.0, 1.0], size=3))
        spec = MotionProfileSpec(self.family, A, phase, ratios, signs, preset=self.name)
        r = np.asarray(ratios)
        if self.family == "jitter":
            # Directions follow the axis ratios; redraw if the axial component
            # would out-range the in-plane motion.
            for _ in range(100):
                w = tuple(float(x) for x in rng.uniform(0.2, 1.0, size=3))
                dirs = tuple(_unit(r * rng.normal(size=3)) for _ in range(3))
                spec = replace(spec, jitter_weights=w, jitter_dirs=dirs)
                d = gen_jitter(spec, max(ALLOWED_N)).displacements
                if np.abs(d[:, 2]).max() <= np.abs(d[:, :2]).max():
                    break
        elif self.family == "piecewise":
            bf = float(rng.uniform(*self.ranges["breakpoint_fraction"]))
            df = float(rng.uniform(*self.ranges["dwell_fraction"]))
            a2 = A * float(rng.uniform(*self.ranges["second_segment_amplitude_fraction"]))
            u1 = np.asarray(_unit(r * np.asarray(signs)))
            for _ in range(100):
                u2 = np.asarray(_unit(r * rng.choice([-1.0, 1.0], size=3) * rng.uniform(0.5, 1.0, 3)))
                # a new heading that does not reverse the first one
                if 0.0 <= float(u1 @ u2) < 0.95:
                    break
            else:
                u2 = u1
            spec = replace(
                spec,
                segment_amplitudes=(A, a2),
                segment_dirs=(tuple(u1), tuple(u2)),
                breakpoint_frac=bf,
                dwell_frac=df,
            )
        return spec


def sample_preset(name, seed):
    catalog = preset_catalog()
    if name not in catalog:
        raise ValidationError(f"unknown preset {name!r}")
    return catalog[name].sample(seed)
