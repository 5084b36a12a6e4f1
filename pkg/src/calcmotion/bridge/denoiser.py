"""Noise predictors for the bridge sampler.

Every denoiser is called as ``eps_hat = f(x_t, y, t)`` with windows of
shape ``(B, H, W, k)`` and integer steps of shape ``(B,)``. Trainable ones
also expose ``params`` (name -> array), ``forward`` returning a cache and
``backward`` turning an output gradient into parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..exceptions import ValidationError
from ..validation import check_odd, check_positive_int


class IdentityDenoiser:
    """Predicts zero noise, so the direct sampler returns its input."""

    def __call__(self, x_t, y, t):
        return np.zeros_like(x_t)


class OracleDenoiser:
    """Predicts ``x_t - x0`` from the known clean windows ``x0``."""

    def __init__(self, x0):
        self.x0 = np.asarray(x0, dtype=np.float64)

    def __call__(self, x_t, y, t):
        if x_t.shape != self.x0.shape:
            raise ValidationError(f"oracle holds windows {self.x0.shape}, got {x_t.shape}")
        return x_t - self.x0


class TrainableDenoiser:
    params: dict

    def __call__(self, x_t, y, t):
        return self.forward(x_t, y, t)[0]

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ValidationError(f"expected {self.n_params()} parameters, got {flat.size}")
        i = 0
        for name, p in self.params.items():
            self.params[name] = flat[i:i + p.size].reshape(p.shape).copy()
            i += p.size


class LinearDenoiser(TrainableDenoiser):
    """``eps_hat = a x_t + b y``; two parameters, handy for gradient checks."""

    def __init__(self, a=0.0, b=0.0):
        self.params = {"a": np.array([float(a)]), "b": np.array([float(b)])}

    def forward(self, x_t, y, t):
        return self.params["a"][0] * x_t + self.params["b"][0] * y, (x_t, y)

    def backward(self, cache, d_out):
        x_t, y = cache
        return {"a": np.array([np.sum(d_out * x_t)]), "b": np.array([np.sum(d_out * y)])}


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture of :class:`TinyDenoiser`.

    ``depth`` counts 3x3 convolutions including the output one. With
    ``residual`` the prediction is ``(x_t - y) + net(x_t, y, t)``.
    """

    k: int = 3
    width: int = 16
    depth: int = 4
    emb_dim: int = 16
    T: int = 1000
    residual: bool = True
    zero_init_output: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        check_odd(self.k, "k")
        check_positive_int(self.width, "width")
        check_positive_int(self.depth, "depth")
        check_positive_int(self.emb_dim, "emb_dim", minimum=2)
        if self.emb_dim % 2:
            raise ValidationError("emb_dim must be even")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self):
        return asdict(self)


def timestep_embedding(t, dim, T):
    """Sinusoidal features of ``t / T`` with geometrically spaced frequencies."""
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    arg = (np.asarray(t, dtype=np.float64) / T * 1000.0)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _conv3x3(xp, w):
    """Zero-padded input (B, H+2, W+2, C) convolved with w (3, 3, C, Cout)."""
    B, H, W = xp.shape[0], xp.shape[1] - 2, xp.shape[2] - 2
    out = np.zeros((B, H, W, w.shape[3]), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            out += xp[:, i:i + H, j:j + W, :] @ w[i, j]
    return out


def _conv3x3_backward(xp, w, g, need_input):
    """Weight gradient and (optionally) the gradient of the unpadded input."""
    B, H, W, cout = g.shape
    C = xp.shape[3]
    g2 = g.reshape(-1, cout)
    dw = np.empty_like(w)
    dx = np.zeros((B, H + 2, W + 2, C), dtype=g.dtype) if need_input else None
    for i in range(3):
        for j in range(3):
            dw[i, j] = np.tensordot(xp[:, i:i + H, j:j + W, :], g, axes=([0, 1, 2], [0, 1, 2]))
            if need_input:
                dx[:, i:i + H, j:j + W, :] += (g2 @ w[i, j].T).reshape(B, H, W, C)
    return dw, None if dx is None else dx[:, 1:-1, 1:-1, :]


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))
    return z * s, s


class TinyDenoiser(TrainableDenoiser):
    """Small residual convolutional noise predictor.

    Input channels are ``x_t`` and ``y`` stacked (``2k``), output has ``k``.
    Each layer receives a per-channel bias projected from the timestep
    embedding. Hidden layers use SiLU. Arithmetic runs in ``config.dtype``.
    """

    def __init__(self, config=None):
        self.config = config or DenoiserConfig()
        c = self.config
        rng = np.random.default_rng(c.seed)
        chans = [2 * c.k] + [c.width] * (c.depth - 1) + [c.k]
        self.params = {}
        for layer, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            silent = layer == c.depth - 1 and c.zero_init_output
            scale = 0.0 if silent else math.sqrt(2.0 / (9 * cin))
            self.params[f"w{layer}"] = rng.standard_normal((3, 3, cin, cout)) * scale
            self.params[f"b{layer}"] = np.zeros(cout)
            self.params[f"p{layer}"] = rng.standard_normal((c.emb_dim, cout)) * (
                0.0 if silent else 1.0 / math.sqrt(c.emb_dim))
        self.params = {k: v.astype(c.dtype) for k, v in self.params.items()}

    def set_flat(self, flat):
        super().set_flat(flat)
        self.params = {k: v.astype(self.config.dtype) for k, v in self.params.items()}

    def forward(self, x_t, y, t):
        c = self.config
        x_t = np.asarray(x_t, dtype=c.dtype)
        y = np.asarray(y, dtype=c.dtype)
        if x_t.shape != y.shape or x_t.ndim != 4 or x_t.shape[3] != c.k:
            raise ValidationError(f"expected (B, H, W, {c.k}) windows, got {x_t.shape} and {y.shape}")
        B = x_t.shape[0]
        emb = timestep_embedding(np.broadcast_to(t, (B,)), c.emb_dim, c.T).astype(c.dtype)
        h = np.concatenate([x_t, y], axis=3)
        cache = {"emb": emb, "layers": []}
        for layer in range(c.depth):
            xp = np.pad(h, ((0, 0), (1, 1), (1, 1), (0, 0)))
            bias = self.params[f"b{layer}"] + emb @ self.params[f"p{layer}"]  # B, cout
            z = _conv3x3(xp, self.params[f"w{layer}"]) + bias[:, None, None, :]
            entry = {"xp": xp}
            if layer < c.depth - 1:
                h, s = _silu(z)
                entry["z"], entry["s"] = z, s
            else:
                h = z
            cache["layers"].append(entry)
        out = h + (x_t - y) if c.residual else h
        return out, cache

    def backward(self, cache, d_out):
        c = self.config
        grads = {}
        g = np.asarray(d_out, dtype=c.dtype)
        emb = cache["emb"]
        for layer in range(c.depth - 1, -1, -1):
            entry = cache["layers"][layer]
            if layer < c.depth - 1:
                z, s = entry["z"], entry["s"]
                g = g * (s * (1.0 + z * (1.0 - s)))
            gb = g.sum(axis=(1, 2))  # B, cout
            grads[f"w{layer}"], g_in = _conv3x3_backward(entry["xp"], self.params[f"w{layer}"], g,
                                                         need_input=layer > 0)
            grads[f"b{layer}"] = gb.sum(axis=0)
            grads[f"p{layer}"] = emb.T @ gb
            g = g_in
        return {name: grads[name] for name in self.params}
