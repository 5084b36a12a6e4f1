"""scikit-learn style wrapper around training and sliding-window correction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..exceptions import ValidationError
from ..grid import VoxelGrid, hu_from_normalized, normalize
from ..validation import check_same_geometry
from .denoiser import DenoiserConfig, TinyDenoiser
from .inference import sliding_window_correct
from .schedule import schedule_new
from .training import Hyperparameters, TrainState, WindowDataset, train


class BridgeCorrector(TransformerMixin, BaseEstimator):
    """Learns to map motion-corrupted HU volumes onto clean ones.

    ``fit(X, y)`` takes lists of corrupted (``X``) and clean (``y``)
    :class:`VoxelGrid` volumes; ``predict`` returns corrected HU volumes.
    ``crop`` trains on random in-plane crops of that size (full windows
    when ``None``); inference always sees the full window.
    """

    def __init__(self, T=1000, interval=100, lam=20.0, tau=60.0, k=3, width=16, depth=4,
                 emb_dim=16, lr=2e-4, beta1=0.9, beta2=0.999, weight_decay=1e-4,
                 batch_size=64, n_steps=2000, crop=None, mode="posterior", random_state=0):
        self.T = T
        self.interval = interval
        self.lam = lam
        self.tau = tau
        self.k = k
        self.width = width
        self.depth = depth
        self.emb_dim = emb_dim
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.crop = crop
        self.mode = mode
        self.random_state = random_state

    def _hparams(self):
        return Hyperparameters(lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                               weight_decay=self.weight_decay, batch_size=self.batch_size,
                               lam=self.lam, tau=self.tau)

    def _check_pairs(self, X, y):
        X, y = list(X), list(y)
        if not X or len(X) != len(y):
            raise ValidationError(f"need equally many corrupted and clean volumes, got {len(X)} and {len(y)}")
        for a, b in zip(X, y):
            check_same_geometry(a, b, "corrupted and clean volume")
        return X, y

    def fit(self, X, y, callback=None):
        X, y = self._check_pairs(X, y)
        self.schedule_ = schedule_new(self.T, self.interval)
        config = DenoiserConfig(k=self.k, width=self.width, depth=self.depth, emb_dim=self.emb_dim,
                                T=self.T, seed=int(self.random_state))
        self.denoiser_ = TinyDenoiser(config)
        self.state_ = TrainState(self.denoiser_, self._hparams())
        data = WindowDataset(self.k)
        for corrupted, clean in zip(X, y):
            data.add(normalize(clean).values, normalize(corrupted).values)
        self.n_windows_ = len(data)
        self.voxel_volume_ = X[0].voxel_volume
        rng = np.random.default_rng([int(self.random_state), 1])
        self.history_ = train(self.state_, data, self.schedule_, self.n_steps, rng, self.crop,
                              self.voxel_volume_, callback)
        self.n_features_in_ = 1
        return self

    def correct(self, grid, rng=None):
        """Corrected normalized grid and the sampler traces for one volume."""
        check_is_fitted(self, "denoiser_")
        return sliding_window_correct(normalize(grid), self.denoiser_, self.schedule_, self.k,
                                      self.mode, rng)

    def predict(self, X):
        check_is_fitted(self, "denoiser_")
        out = []
        for g in X:
            if not isinstance(g, VoxelGrid):
                raise ValidationError("predict expects VoxelGrid volumes")
            corrected, _ = self.correct(g)
            out.append(g.with_values(hu_from_normalized(corrected.values), unit="HU"))
        return out

    def transform(self, X):
        return self.predict(X)
