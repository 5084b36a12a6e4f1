"""Synthesis of motion-corrupted volumes from motion-free ones.

The calcium is inpainted out of the clean volume, then re-inserted at the
trajectory position for every projection angle. Each angle contributes
one projection of its own instantaneous volume, and the resulting
sinograms are reconstructed slice by slice. Projections are taken of the
volume relative to air, so zero-padding outside the field of view is
physically consistent.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import io, motion, tomo
from .exceptions import ValidationError
from .grid import BinaryMask, VoxelGrid, inpaint, shift_region
from .validation import check_positive_int, check_same_geometry

logger = logging.getLogger(__name__)

AIR_HU = -1000.0


@dataclass
class PhantomSpec:
    """Layout of a cardiac-slice-like test phantom.

    Lesion radii are in voxels; ``n_lesions`` and the per-lesion draws are
    inclusive ranges.
    """

    dims: tuple = (64, 64, 16)
    spacing: tuple = (0.7, 0.7, 2.5)
    n_lesions: tuple = (1, 4)
    lesion_radius: tuple = (1.5, 3.5)
    lesion_depth: tuple = (1.0, 2.5)
    peak_hu: tuple = (150.0, 1000.0)
    body_hu: float = 40.0
    lung_hu: float = -800.0
    air_hu: float = AIR_HU
    edge_sigma: float = 0.7

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValidationError(f"phantom dims must be three positive integers, got {self.dims}")
        if self.dims[0] < 16 or self.dims[1] < 16:
            raise ValidationError(f"phantom needs at least 16x16 in-plane, got {self.dims[:2]}")
        lo, hi = self.peak_hu
        if not (130.0 <= lo <= hi <= 1000.0):
            raise ValidationError(f"lesion peak range must lie within [130, 1000] HU, got {self.peak_hu}")
        if not (1 <= self.n_lesions[0] <= self.n_lesions[1]):
            raise ValidationError(f"invalid lesion count range {self.n_lesions}")


def _body_layers(spec):
    from scipy import ndimage

    nx, ny, _ = spec.dims
    X, Y = np.meshgrid(np.arange(nx) - (nx - 1) / 2, np.arange(ny) - (ny - 1) / 2, indexing="ij")
    body = (X / (0.42 * nx)) ** 2 + (Y / (0.34 * ny)) ** 2 <= 1.0
    lungs = np.zeros_like(body)
    for side in (-1, 1):
        lungs |= ((X - side * 0.21 * nx) / (0.12 * nx)) ** 2 + ((Y + 0.02 * ny) / (0.22 * ny)) ** 2 <= 1.0
    slab = np.full((nx, ny), spec.air_hu)
    slab[body] = spec.body_hu
    slab[lungs] = spec.lung_hu
    if spec.edge_sigma > 0:
        slab = ndimage.gaussian_filter(slab, spec.edge_sigma, mode="nearest")
    heart = (X / (0.09 * nx)) ** 2 + (Y / (0.22 * ny)) ** 2 <= 1.0
    return slab, heart


def make_phantom(spec=None, seed=0):
    """Deterministic phantom volume and its calcium mask.

    The mask marks lesion-support voxels at or above 130 HU, so thresholding
    the clean phantom reproduces it exactly.
    """
    spec = spec or PhantomSpec()
    rng = np.random.default_rng(seed)
    nx, ny, nz = spec.dims
    slab, heart = _body_layers(spec)
    values = np.repeat(slab[:, :, None], nz, axis=2)

    count = int(rng.integers(spec.n_lesions[0], spec.n_lesions[1] + 1))
    hx, hy = np.nonzero(heart)
    X, Y, Z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    occupied = np.zeros(spec.dims, dtype=bool)
    mask = np.zeros(spec.dims, dtype=bool)
    placed = 0
    for _ in range(500 * count):
        if placed == count:
            break
        rx, ry = rng.uniform(*spec.lesion_radius, size=2)
        rz = min(rng.uniform(*spec.lesion_depth), max(nz / 2 - 0.5, 0.5))
        peak = float(rng.uniform(*spec.peak_hu))
        j = rng.integers(hx.size)
        cx, cy = int(hx[j]), int(hy[j])
        z_lo, z_hi = int(np.ceil(rz - 0.5)), nz - 1 - int(np.ceil(rz - 0.5))
        cz = int(rng.integers(min(z_lo, z_hi), max(z_lo, z_hi) + 1))
        rho2 = ((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2 + ((Z - cz) / rz) ** 2
        support = rho2 <= 1.0
        halo = ((X - cx) / (rx + 1.5)) ** 2 + ((Y - cy) / (ry + 1.5)) ** 2 + ((Z - cz) / (rz + 1.0)) ** 2 <= 1.0
        if (halo & occupied).any():
            continue
        base = values[cx, cy, cz]
        profile = base + (peak - base) * np.exp(-2.0 * rho2)
        values = np.where(support, np.maximum(values, profile), values)
        occupied |= halo
        mask |= support & (values >= 130.0)
        placed += 1
    if placed < count:
        raise ValidationError(f"could not place {count} disjoint lesions in {spec.dims}")
    return VoxelGrid(values, spec.spacing), BinaryMask(mask, spec.spacing)


@dataclass
class SimConfig:
    """Which motion to apply and how the scan is sampled.

    Either ``preset`` (drawn with ``seed``) or an explicit ``spec``.
    ``n_angles`` is drawn from the allowed set when left as ``None``.
    """

    preset: str | None = "oscillation-xy-strong"
    spec: motion.MotionProfileSpec | None = None
    n_angles: int | None = None
    seed: int = 0
    amplitude: float | None = None
    reconstruct_clean: bool = False
    window: str = "ramlak"
    air_hu: float = AIR_HU

    def resolve(self):
        """Return the concrete ``(MotionProfileSpec, N)`` for this config."""
        if self.spec is not None:
            spec = self.spec
        elif self.preset is not None:
            spec = motion.sample_preset(self.preset, self.seed)
        else:
            raise ValidationError("SimConfig needs a preset or an explicit spec")
        if self.amplitude is not None:
            spec = spec.with_amplitude(self.amplitude)
        n = self.n_angles
        if n is None:
            rng = np.random.default_rng([int(self.seed), 7919])
            n = int(rng.choice(motion.ALLOWED_N))
        if n not in motion.ALLOWED_N:
            raise ValidationError(f"N={n} not in the allowed set {motion.ALLOWED_N}")
        return spec, n

    def to_dict(self):
        d = asdict(self)
        d["spec"] = None if self.spec is None else self.spec.to_dict()
        return d


@dataclass
class PairedSample:
    clean: VoxelGrid
    corrupted: VoxelGrid
    mask: BinaryMask
    config: SimConfig
    trajectory: motion.Trajectory = field(repr=False, default=None)
    sinogram: np.ndarray | None = field(repr=False, default=None)


def static_reconstruction(x0, angles, window="ramlak", air_hu=AIR_HU):
    """fbp of the motion-free projections (the zero-motion reference)."""
    rel = x0.values - air_hu
    sinos = tomo.radon(rel, angles, x0.spacing[0])
    recon = tomo.fbp_stack(sinos, angles, x0.dims[:2], x0.spacing[0], window) + air_hu
    return x0.with_values(recon)


def simulate_motion(x0, m, cfg=None, keep_sinogram=False):
    """Synthesize a motion-corrupted reconstruction of ``x0``."""
    cfg = cfg or SimConfig()
    check_same_geometry(x0, m, "volume and mask")
    if not m.any():
        raise ValidationError("calcium mask is empty")
    if abs(x0.spacing[0] - x0.spacing[1]) > 1e-9:
        raise ValidationError("in-plane spacing must be isotropic")
    spec, N = cfg.resolve()
    traj = motion.generate(spec, N)
    angles = traj.angles
    air = cfg.air_hu
    spacing = x0.spacing[0]

    inpainted = inpaint(x0, m)
    background = inpainted.values - air
    bits = np.nonzero(m.bits)
    sinos = np.empty((x0.dims[2], N, tomo.n_detector_bins(*x0.dims[:2])))
    for i, (theta, d) in enumerate(zip(angles, traj.displacements)):
        sinos[:, i, :] = tomo.project_stack(background, theta, spacing)
        moved = shift_region(x0, m, d, background=inpainted)
        lo = [max(int(np.floor(b.min() + s)) - 1, 0) for b, s in zip(bits, d)]
        hi = [min(int(np.ceil(b.max() + s)) + 2, n) for b, s, n in zip(bits, d, x0.dims)]
        if any(a >= b for a, b in zip(lo, hi)):
            continue
        region = tuple(slice(a, b) for a, b in zip(lo, hi))
        delta = np.zeros(x0.dims)
        delta[region] = moved.values[region] - inpainted.values[region]
        sinos[:, i, :] += tomo.project_stack(delta, theta, spacing, region=(lo, hi))

    recon = tomo.fbp_stack(sinos, angles, x0.dims[:2], spacing, cfg.window) + air
    clean = static_reconstruction(x0, angles, cfg.window, air) if cfg.reconstruct_clean else x0.copy()
    return PairedSample(
        clean=clean,
        corrupted=x0.with_values(recon),
        mask=m,
        config=cfg,
        trajectory=traj,
        sinogram=sinos if keep_sinogram else None,
    )


class MotionSimulator(TransformerMixin, BaseEstimator):
    """Stateless transformer turning ``(VoxelGrid, BinaryMask)`` pairs into
    motion-corrupted ``VoxelGrid``s.

    Item ``i`` of ``X`` is simulated with seed ``random_state + i``.
    """

    def __init__(self, preset="oscillation-xy-strong", n_angles=None, amplitude=None,
                 reconstruct_clean=False, random_state=0):
        self.preset = preset
        self.n_angles = n_angles
        self.amplitude = amplitude
        self.reconstruct_clean = reconstruct_clean
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.preset not in motion.preset_catalog():
            raise ValidationError(f"unknown preset {self.preset!r}")
        self.n_features_in_ = 1
        return self

    def _config(self, i):
        return SimConfig(preset=self.preset, n_angles=self.n_angles, seed=int(self.random_state) + i,
                         amplitude=self.amplitude, reconstruct_clean=self.reconstruct_clean)

    def transform(self, X):
        return [simulate_motion(g, m, self._config(i)).corrupted for i, (g, m) in enumerate(X)]

    def simulate(self, X):
        """Like :meth:`transform` but returns full :class:`PairedSample` objects."""
        return [simulate_motion(g, m, self._config(i)) for i, (g, m) in enumerate(X)]


def _case_seed(seed, case):
    return int(np.random.SeedSequence([int(seed), int(case)]).generate_state(1)[0])


def plan_dataset(n_cases, presets=None, seed=0, test_fraction=0.2):
    """Manifest entries (without files) for ``n_cases`` cases times presets."""
    n_cases = check_positive_int(n_cases, "n_cases")
    catalog = motion.preset_catalog()
    presets = list(catalog) if presets is None else list(presets)
    for p in presets:
        if p not in catalog:
            raise ValidationError(f"unknown preset {p!r}")
    rng = np.random.default_rng([int(seed), 104729])
    order = rng.permutation(n_cases)
    n_test = int(round(test_fraction * n_cases))
    if n_cases >= 2:
        n_test = min(max(n_test, 1), n_cases - 1)
    else:
        n_test = 0
    test_ids = set(int(c) for c in order[:n_test])

    entries = []
    for case in range(n_cases):
        case_id = f"case{case:04d}"
        cseed = _case_seed(seed, case)
        for p in presets:
            sim_seed = int(np.random.SeedSequence([cseed, catalog[p].index]).generate_state(1)[0])
            _, n = SimConfig(preset=p, seed=sim_seed).resolve()
            entries.append({
                "case_id": case_id,
                "clean_path": f"{case_id}/clean.json",
                "mask_path": f"{case_id}/mask.json",
                "corrupt_path": f"{case_id}/{p}.json",
                "preset": p,
                "N": n,
                "seed": sim_seed,
                "phantom_seed": cseed,
                "split": "test" if case in test_ids else "train",
            })
    return entries


def build_dataset(out_dir, n_cases, phantom_spec=None, presets=None, seed=0,
                  test_fraction=0.2, reconstruct_clean=False, threads=1):
    """Generate phantoms, simulate every (case, preset) pair and write a
    ``manifest.json`` list next to the volumes. Returns the manifest path."""
    out = Path(out_dir)
    entries = plan_dataset(n_cases, presets, seed, test_fraction)
    phantom_spec = phantom_spec or PhantomSpec()

    phantoms = {}
    for e in entries:
        if e["case_id"] not in phantoms:
            grid, mask = make_phantom(phantom_spec, e["phantom_seed"])
            phantoms[e["case_id"]] = (grid, mask)
            io.write_volume(out / e["clean_path"], grid)
            io.write_mask(out / e["mask_path"], mask)

    def run(e):
        grid, mask = phantoms[e["case_id"]]
        cfg = SimConfig(preset=e["preset"], n_angles=e["N"], seed=e["seed"],
                        reconstruct_clean=reconstruct_clean)
        sample = simulate_motion(grid, mask, cfg)
        io.write_volume(out / e["corrupt_path"], sample.corrupted)
        if reconstruct_clean:
            io.write_volume(out / e["corrupt_path"].replace(".json", "_clean_recon.json"), sample.clean)
        logger.info("simulated %s / %s (N=%d)", e["case_id"], e["preset"], e["N"])

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, entries))
    else:
        for e in entries:
            run(e)

    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2) + "\n")
    return manifest


def load_manifest(path):
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: manifest must be a JSON list")
    root = path.parent
    required = ("case_id", "clean_path", "corrupt_path", "mask_path", "preset", "N", "seed", "split")
    for e in entries:
        missing = [k for k in required if k not in e]
        if missing:
            raise ValidationError(f"{path}: manifest entry lacks {missing}")
        for key in ("clean_path", "corrupt_path", "mask_path"):
            if not (root / e[key]).exists():
                raise FileNotFoundError(f"manifest references missing file {root / e[key]}")
    return root, entries


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
