"""Checkpoints: raw float32 parameter blob plus a JSON header."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..exceptions import ValidationError
from .denoiser import DenoiserConfig, TinyDenoiser

FORMAT = "calcmotion-denoiser/1"


def save_checkpoint(path, denoiser, step=0, hparams=None, sched=None, extra=None):
    stem = Path(path).with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob = stem.with_suffix(".f32")
    blob.write_bytes(denoiser.get_flat().astype("<f4").tobytes())
    header = {
        "format": FORMAT,
        "architecture": denoiser.config.to_dict(),
        "layout": [[name, list(p.shape)] for name, p in denoiser.params.items()],
        "payload": blob.name,
        "step": int(step),
        "hyperparameters": None if hparams is None else hparams.to_dict(),
        "schedule": None if sched is None else {"T": sched.T, "interval": sched.interval},
    }
    if extra:
        header["extra"] = extra
    head = stem.with_suffix(".json")
    head.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return head


def load_checkpoint(path):
    """Return ``(denoiser, header)``."""
    stem = Path(path).with_suffix("")
    try:
        header = json.loads(stem.with_suffix(".json").read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed checkpoint header: {exc}") from exc
    if header.get("format") != FORMAT:
        raise ValidationError(f"{stem}: not a denoiser checkpoint")
    denoiser = TinyDenoiser(DenoiserConfig(**header["architecture"]))
    layout = [[n, list(p.shape)] for n, p in denoiser.params.items()]
    if layout != header["layout"]:
        raise ValidationError(f"{stem}: parameter layout does not match the architecture")
    flat = np.frombuffer((stem.parent / header["payload"]).read_bytes(), dtype="<f4")
    denoiser.set_flat(flat.astype(np.float64))
    return denoiser, header
