"""Bridge schedule, forward marginals and the two reverse samplers.

The bridge runs from the clean image ``x0`` at ``t = 0`` to the corrupted
image ``y`` at ``t = T``. Its marginal is

    x_t = (1 - a_t) x0 + a_t y + sqrt(d_t) eps,   a_t = t / T,   d_t = 2 (a_t - a_t^2)

and the denoiser is trained to predict ``n_t = x_t - x0``. Reverse steps
go from ``t`` down to ``p < t`` on a coarse grid of visited steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ValidationError
from ..validation import check_positive_int, check_rng

MODES = ("posterior", "direct")


@dataclass(frozen=True)
class StepCoefficients:
    """Posterior mean ``c_x x_t + c_y y - c_e eps_hat`` and variance for t -> p."""

    t: int
    p: int
    c_x: float
    c_y: float
    c_e: float
    variance: float
    delta_cond: float  # d_{t|p}


@dataclass(frozen=True)
class BridgeSchedule:
    T: int
    interval: int
    alpha: np.ndarray = field(repr=False)
    delta: np.ndarray = field(repr=False)

    @property
    def n_steps(self):
        return self.T // self.interval

    @property
    def visited(self):
        """Steps visited by the sampler: T, T - interval, ..., interval, 0."""
        return np.arange(self.T, -1, -self.interval)

    def check_t(self, t):
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer) or np.any((t < 0) | (t > self.T)):
            raise ValidationError(f"step index must be an integer in [0, {self.T}]")
        return t

    def delta_cond(self, t, p):
        """Variance of the transition from step ``p`` to step ``t > p``."""
        a = (1.0 - self.alpha[t]) / (1.0 - self.alpha[p])
        return self.delta[t] - self.delta[p] * a ** 2

    def coefficients(self, t, p=None):
        """Reverse coefficients for the step ``t -> p`` (default ``p = t - 1``)."""
        t = int(t)
        p = t - 1 if p is None else int(p)
        if not (0 <= p < t <= self.T):
            raise ValidationError(f"reverse step needs 0 <= p < t <= T, got t={t}, p={p}")
        at, ap = self.alpha[t], self.alpha[p]
        dt, dp = self.delta[t], self.delta[p]
        dcond = self.delta_cond(t, p)
        a = (1.0 - at) / (1.0 - ap)
        if dt > 0:
            ratio = dcond / dt
            c_x = (dp / dt) * a + ratio * (1.0 - ap)
            c_y = ap - at * a * dp / dt
        else:
            # t = T: x_T = y carries no information about x0, so the
            # posterior is the forward marginal at p (limit of the ratios)
            ratio = 1.0
            c_x, c_y = 1.0, 0.0
        c_e = (1.0 - ap) * ratio
        return StepCoefficients(t, p, float(c_x), float(c_y), float(c_e), float(dp * ratio), float(dcond))

    def fine_coefficients(self):
        """Arrays ``(c_x, c_y, c_e, d_{t|t-1})`` indexed by t; entry 0 is unused."""
        out = np.zeros((4, self.T + 1))
        for t in range(1, self.T + 1):
            c = self.coefficients(t)
            out[:, t] = (c.c_x, c.c_y, c.c_e, c.delta_cond)
        return out

    def coarse_coefficients(self):
        v = self.visited
        return [self.coefficients(t, p) for t, p in zip(v[:-1], v[1:])]


def schedule_new(T=1000, interval=100):
    T = check_positive_int(T, "T", minimum=2)
    interval = check_positive_int(interval, "interval")
    if T % interval:
        raise ValidationError(f"interval {interval} does not divide T={T}")
    alpha = np.arange(T + 1, dtype=np.float64) / T
    delta = 2.0 * (alpha - alpha ** 2)
    return BridgeSchedule(T, interval, alpha, delta)


def _per_item(values, t, ndim):
    return np.asarray(values)[t].reshape(np.shape(t) + (1,) * (ndim - np.ndim(t)))


def forward_sample(x0, y, t, eps, sched):
    """Draw ``x_t`` from the bridge marginal. ``t`` may be per batch item."""
    t = sched.check_t(t)
    x0, y, eps = (np.asarray(a, dtype=np.float64) for a in (x0, y, eps))
    if not (x0.shape == y.shape == eps.shape):
        raise ValidationError(f"shape mismatch: {x0.shape}, {y.shape}, {eps.shape}")
    a = _per_item(sched.alpha, t, x0.ndim)
    d = _per_item(sched.delta, t, x0.ndim)
    return (1.0 - a) * x0 + a * y + np.sqrt(d) * eps


def target_noise(x0, y, t, eps, sched):
    """The regression target ``a_t (y - x0) + sqrt(d_t) eps``."""
    t = sched.check_t(t)
    x0, y, eps = (np.asarray(a, dtype=np.float64) for a in (x0, y, eps))
    a = _per_item(sched.alpha, t, x0.ndim)
    d = _per_item(sched.delta, t, x0.ndim)
    return a * (y - x0) + np.sqrt(d) * eps


def posterior_step(x_t, y, eps_hat, t, sched, p=None, rng=None, stochastic=False):
    """Posterior mean for ``t -> p``; with ``stochastic`` a Gaussian draw
    around it with the posterior variance."""
    if int(t) == 0:
        raise ValidationError("no reverse step from t = 0")
    c = sched.coefficients(t, p)
    mu = c.c_x * x_t + c.c_y * y - c.c_e * eps_hat
    if stochastic and c.variance > 0:
        mu = mu + np.sqrt(c.variance) * check_rng(rng).standard_normal(np.shape(mu))
    return mu


def direct_step(x_t, y, eps_hat):
    """Subtract the predicted noise outright."""
    return np.asarray(x_t) - np.asarray(eps_hat)


@dataclass
class SampleTrace:
    steps: list = field(default_factory=list)
    states: list = field(default_factory=list, repr=False)

    def append(self, t, x):
        self.steps.append(int(t))
        self.states.append(np.array(x, copy=True))

    def __len__(self):
        return len(self.steps)


def sample(y, denoiser, sched, mode="posterior", rng=None, stochastic=False, keep_states=True):
    """Run the reverse bridge from ``x_T = y`` over the visited steps.

    ``y`` has a leading batch axis. Returns ``(x0_estimate, trace)``.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown sampler mode {mode!r}; choose from {MODES}")
    y = np.asarray(y, dtype=np.float64)
    rng = check_rng(rng)
    x = y.copy()
    trace = SampleTrace()
    v = sched.visited
    for t, p in zip(v[:-1], v[1:]):
        trace.append(t, x) if keep_states else trace.steps.append(int(t))
        eps_hat = denoiser(x, y, np.full(y.shape[0], t))
        if mode == "direct":
            x = direct_step(x, y, eps_hat)
        else:
            x = posterior_step(x, y, eps_hat, t, sched, p=p, rng=rng, stochastic=stochastic)
    trace.append(0, x) if keep_states else trace.steps.append(0)
    return x, trace
