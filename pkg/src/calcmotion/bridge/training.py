"""Training: noise regression plus the calcium consistency term, with Adam."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..exceptions import NumericalError, ValidationError
from ..grid import HU_RANGE, extract_context_windows, hu_from_normalized
from ..score import DEFAULT_TAU, calcium_consistency_loss
from ..validation import check_positive_int, check_rng
from .schedule import forward_sample, target_noise


@dataclass
class Hyperparameters:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 64
    lam: float = 20.0
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError(f"loss weight must be >= 0, got {self.lam}")
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("invalid optimizer settings")
        check_positive_int(self.batch_size, "batch_size")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    """Optimizer state for one denoiser. ``m`` and ``v`` are Adam's moment
    estimates keyed like the denoiser parameters."""

    denoiser: object
    hparams: Hyperparameters = field(default_factory=Hyperparameters)
    step: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name, p in self.denoiser.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))


def adam_update(state, grads):
    """One Adam step; weight decay is added to the gradient before the moments."""
    hp = state.hparams
    state.step += 1
    b1, b2 = hp.beta1, hp.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, p in state.denoiser.params.items():
        g = grads[name] + hp.weight_decay * p
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        step = hp.lr * (state.m[name] / corr1) / (np.sqrt(state.v[name] / corr2) + hp.eps)
        state.denoiser.params[name] = p - step


def loss_and_grad(denoiser, x0, y, t, eps, sched, lam=20.0, tau=DEFAULT_TAU, voxel_volume=1.0):
    """Total loss and parameter gradients for fixed draws of ``t`` and ``eps``.

    Windows are normalized. The consistency term compares the estimate
    ``x_t - eps_hat`` with ``x0`` after mapping both back to HU.
    """
    x_t = forward_sample(x0, y, t, eps, sched)
    n_t = target_noise(x0, y, t, eps, sched)
    eps_hat, cache = denoiser.forward(x_t, y, t)
    diff = eps_hat - n_t
    mse = float(np.mean(diff ** 2))
    d_eps = 2.0 * diff / diff.size
    calc = 0.0
    if lam > 0:
        x0_hat = hu_from_normalized(x_t - eps_hat)
        calc, g_hu = calcium_consistency_loss(hu_from_normalized(x0), x0_hat, tau, voxel_volume)
        # d x0_hat / d eps_hat = -HU_RANGE
        d_eps = d_eps - lam * HU_RANGE * g_hu
    total = mse + lam * calc
    grads = denoiser.backward(cache, d_eps)
    return {"mse": mse, "calc": float(calc), "total": float(total)}, grads


def train_step(state, batch, sched, rng=None, voxel_volume=1.0):
    """Draw ``t`` and ``eps`` per item, compute the loss and update the parameters.

    ``batch`` is ``(x0, y)`` or ``(x0, y, mask)`` of normalized windows with a
    leading batch axis; a mask, if present, is not used by the loss.
    Returns ``{"mse", "calc", "total"}``.
    """
    rng = check_rng(rng)
    x0, y = np.asarray(batch[0], dtype=np.float64), np.asarray(batch[1], dtype=np.float64)
    if x0.shape != y.shape or x0.shape[0] == 0:
        raise ValidationError(f"batch must hold matching non-empty windows, got {x0.shape}, {y.shape}")
    B = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    hp = state.hparams
    losses, grads = loss_and_grad(state.denoiser, x0, y, t, eps, sched, hp.lam, hp.tau, voxel_volume)
    bad = not all(math.isfinite(v) for v in losses.values()) or not all(
        np.all(np.isfinite(g)) for g in grads.values())
    if bad:
        raise NumericalError("non-finite loss or gradient", dict(losses, step=state.step + 1))
    adam_update(state, grads)
    return losses


class WindowDataset:
    """Paired normalized context windows cut from paired ROIs.

    ``add`` takes a clean and a corrupted normalized ``(H, W, nz)`` array.
    Batches may be random in-plane crops; with ``calcium_bias`` a crop is
    centred near a calcified voxel of the clean window that often.
    """

    def __init__(self, k=3, threshold=(130.0 + 200.0) / 1000.0):
        self.k = k
        self.threshold = threshold
        self.x0, self.y = [], []

    def add(self, clean, corrupted):
        for wc, wy in zip(extract_context_windows(clean, *clean.shape[:2], self.k),
                          extract_context_windows(corrupted, *corrupted.shape[:2], self.k)):
            self.x0.append(wc.values)
            self.y.append(wy.values)
        return self

    def __len__(self):
        return len(self.x0)

    def arrays(self):
        return np.stack(self.x0), np.stack(self.y)

    def batch(self, rng, size, crop=None, calcium_bias=0.75):
        if not self.x0:
            raise ValidationError("dataset is empty")
        idx = rng.integers(0, len(self.x0), size=size)
        if crop is None:
            return np.stack([self.x0[i] for i in idx]), np.stack([self.y[i] for i in idx])
        H, W = self.x0[0].shape[:2]
        c = min(int(crop), H, W)
        xs, ys = [], []
        for i in idx:
            hot = np.argwhere(self.x0[i][:, :, self.k // 2] >= self.threshold)
            if hot.size and rng.random() < calcium_bias:
                cx, cy = hot[rng.integers(len(hot))] + rng.integers(-c // 4, c // 4 + 1, size=2)
                ox = int(np.clip(cx - c // 2, 0, H - c))
                oy = int(np.clip(cy - c // 2, 0, W - c))
            else:
                ox, oy = int(rng.integers(0, H - c + 1)), int(rng.integers(0, W - c + 1))
            xs.append(self.x0[i][ox:ox + c, oy:oy + c])
            ys.append(self.y[i][ox:ox + c, oy:oy + c])
        return np.stack(xs), np.stack(ys)


def train(state, dataset, sched, n_steps, rng=None, crop=None, voxel_volume=1.0, callback=None):
    """Run ``n_steps`` updates; returns the list of per-step loss dicts."""
    rng = check_rng(rng)
    history = []
    for _ in range(check_positive_int(n_steps, "n_steps", minimum=0)):
        batch = dataset.batch(rng, state.hparams.batch_size, crop)
        losses = train_step(state, batch, sched, rng, voxel_volume)
        losses["step"] = state.step
        history.append(losses)
        if callback is not None:
            callback(losses)
    return history
