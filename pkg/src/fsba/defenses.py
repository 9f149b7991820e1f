"""Defenses: frame-wise colour jitter, additive Gaussian noise, benign fine-tuning and channel pruning.

Nothing here reads a trigger pattern; defenses only see videos, models and benign samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .attacks import TrainConfig, TrainingSample, train_benign
from .errors import ConfigurationError
from .tracker import TrackerModel, to_tensor
from .videodata import Video

JITTER_KINDS = ("hue", "contrast", "brightness", "saturation")
MAX_NOISE_STD = 25 / 255


@dataclass(frozen=True)
class JitterSpec:
    kind: str = "brightness"
    budget: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in JITTER_KINDS:
            raise ConfigurationError(f"unknown jitter kind {self.kind!r}")
        if not 0 <= self.budget <= 0.5:
            raise ConfigurationError(f"jitter budget {self.budget} outside [0, 0.5]")


def _gray(frame: np.ndarray) -> np.ndarray:
    return frame @ np.array([0.299, 0.587, 0.114], dtype=frame.dtype)


def jitter_frame(frame: np.ndarray, kind: str, factor: float) -> np.ndarray:
    """Apply one jitter with an explicit factor (hue: shift as a fraction of the hue circle)."""
    f = np.float32(factor)
    if kind == "brightness":
        out = frame * f
    elif kind == "contrast":
        mean = np.float32(_gray(frame).mean())
        out = (frame - mean) * f + mean
    elif kind == "saturation":
        g = _gray(frame)[..., None]
        out = (frame - g) * f + g
    elif kind == "hue":
        hsv = rgb_to_hsv(np.clip(frame, 0.0, 1.0))
        hsv[..., 0] = np.mod(hsv[..., 0] + factor, 1.0)
        out = hsv_to_rgb(hsv)
    else:
        raise ConfigurationError(f"unknown jitter kind {kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def jitter_factors(spec: JitterSpec, n: int) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "hue":
        return rng.uniform(-spec.budget, spec.budget, n)
    return rng.uniform(1.0 - spec.budget, 1.0 + spec.budget, n)


def jitter_video(video: Video, spec: JitterSpec) -> Video:
    """Each frame gets its own factor drawn uniformly within the budget."""
    if spec.budget == 0:
        return video.with_frames(video.frames.copy())
    factors = jitter_factors(spec, len(video))
    return video.with_frames(np.stack([jitter_frame(f, spec.kind, k) for f, k in zip(video.frames, factors)]))


def gaussian_noise_video(video: Video, std: float, seed: int = 0) -> Video:
    """I.i.d. per-pixel noise, ``std`` in [0, 1] intensity units, clipped back to [0, 1]."""
    if not 0 <= std <= MAX_NOISE_STD + 1e-12:
        raise ConfigurationError(f"noise std {std} outside [0, 25/255]")
    if std == 0:
        return video.with_frames(video.frames.copy())
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, std, size=video.frames.shape).astype(np.float32)
    return video.with_frames(np.clip(video.frames + noise, 0.0, 1.0))


def fine_tune(model: TrackerModel, samples: Sequence[TrainingSample], tcfg: TrainConfig, **kwargs) -> TrackerModel:
    """Resume tracking-loss SGD from ``model`` on benign samples only."""
    if not samples:
        raise ValueError("fine-tuning needs at least one sample")
    tag = str(model.meta.get("provenance", "unknown")) + "+finetuned"
    tuned = train_benign(samples, tcfg, init_model=model, provenance=tag, **kwargs)
    tuned.meta["seed"] = model.meta.get("seed", tcfg.seed)
    tuned.meta["finetune_seed"] = int(tcfg.seed)
    return tuned


@dataclass(frozen=True)
class PruneSpec:
    pruning_rate: float = 0.2
    calibration_fraction: float = 0.05
    layer: int = -1

    def __post_init__(self):
        if not 0 <= self.pruning_rate < 1:
            raise ConfigurationError(f"pruning rate {self.pruning_rate} outside [0, 1)")
        if not 0 < self.calibration_fraction <= 1:
            raise ConfigurationError("calibration fraction outside (0, 1]")


def channel_activation_means(
    model: TrackerModel, crops: Sequence[np.ndarray], layer: int = -1, batch_size: int = 32
) -> np.ndarray:
    """Mean |activation| per channel of ``layer`` over search-region crops."""
    dtype = next(model.parameters()).dtype
    sums, count = None, 0
    model.eval()
    with torch.no_grad():
        for start in range(0, len(crops), batch_size):
            x = to_tensor(np.stack(crops[start : start + batch_size]), dtype)
            act = model.features(x, [layer])[0].abs().double()
            s = act.sum(dim=(0, 2, 3))
            sums = s if sums is None else sums + s
            count += act.shape[0] * act.shape[2] * act.shape[3]
    return (sums / count).numpy()


def prune_channels(model: TrackerModel, calibration: Sequence[np.ndarray], spec: PruneSpec) -> TrackerModel:
    """Mask the ``floor(rate * C)`` least active channels of the target layer."""
    if len(calibration) == 0:
        raise ValueError("empty calibration set")
    idx = spec.layer % len(model.layers)
    c = model.cfg.channels[idx]
    k = math.floor(spec.pruning_rate * c + 1e-9)
    if k >= c:
        raise ConfigurationError(f"pruning {k} of {c} channels leaves none")
    pruned = model.clone()
    if k == 0:
        return pruned
    means = channel_activation_means(model, calibration, idx)
    order = np.argsort(means, kind="stable")
    mask = pruned.channel_mask(idx)
    mask[torch.from_numpy(order[:k])] = 0.0
    pruned.meta["pruned"] = {"layer": idx, "channels": sorted(int(i) for i in order[:k]), "rate": spec.pruning_rate}
    return pruned
