"""Bridge diffusion between clean and motion-corrupted images."""

from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import (
    DenoiserConfig,
    IdentityDenoiser,
    LinearDenoiser,
    OracleDenoiser,
    TinyDenoiser,
    timestep_embedding,
)
from .estimator import BridgeCorrector
from .inference import roi_windows, sliding_window_correct
from .schedule import (
    MODES,
    BridgeSchedule,
    SampleTrace,
    direct_step,
    forward_sample,
    posterior_step,
    sample,
    schedule_new,
    target_noise,
)
from .training import Hyperparameters, TrainState, WindowDataset, adam_update, loss_and_grad, train, train_step

__all__ = [
    "MODES", "BridgeCorrector", "BridgeSchedule", "DenoiserConfig", "Hyperparameters",
    "IdentityDenoiser", "LinearDenoiser", "OracleDenoiser", "SampleTrace", "TinyDenoiser",
    "TrainState", "WindowDataset", "adam_update", "direct_step", "forward_sample",
    "load_checkpoint", "loss_and_grad", "posterior_step", "roi_windows", "sample",
    "save_checkpoint", "schedule_new", "sliding_window_correct", "target_noise",
    "timestep_embedding", "train", "train_step",
]
