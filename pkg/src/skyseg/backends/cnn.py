"""Follower segmenter: a batch-norm CNN with a DeepLab-style channel budget.

Layout: mean-pool stem, one 3×3 conv, then pointwise conv + BN + ReLU layers
in four stages at output strides ``stem``, 2×, 4× and 4× (the last stage is
kept at the same resolution, as atrous backbones do). A low-level skip from
stage one joins the 1×1 classifier head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..errors import ConfigError, ShapeError
from ..numerics import DTYPE, resize_nearest
from ..tta import NormStats, mean_stats
from .prediction import SegPrediction

EPS = 1e-5

# 60 BN layers, 17872 channels in total.
DEFAULT_BN_CHANNELS: tuple[int, ...] = (
    (32, 32, 64, 64)
    + (128,) * 12
    + (256,) * 20
    + (448,) * 23
    + (720,)
)
# index of the first layer of stages 2, 3 and 4
DEFAULT_STAGE_STARTS: tuple[int, ...] = (4, 16, 36)

FORWARD_MODES = ("frozen", "collecting")


@dataclass(frozen=True)
class CnnConfig:
    num_classes: int
    channels: tuple[int, ...] = DEFAULT_BN_CHANNELS
    stage_starts: tuple[int, ...] = DEFAULT_STAGE_STARTS
    stem_pool: int = 8
    # stages whose first layer halves the resolution
    downsample_stages: tuple[bool, ...] = (True, True, False)

    @property
    def total_channels(self) -> int:
        return sum(self.channels)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ConfigError("channels must be a non-empty list of positive ints")
        if list(self.stage_starts) != sorted(self.stage_starts) or any(
            not 0 < s < len(self.channels) for s in self.stage_starts
        ):
            raise ConfigError("stage_starts must be increasing layer indices")
        if len(self.downsample_stages) != len(self.stage_starts):
            raise ConfigError("downsample_stages must align with stage_starts")
        if self.stem_pool < 1:
            raise ConfigError("stem_pool must be >= 1")

    @classmethod
    def small(cls, num_classes: int, stem_pool: int = 4) -> "CnnConfig":
        """Six BN layers, 96 channels: fast enough for long test missions."""
        return cls(num_classes, channels=(8, 8, 16, 16, 24, 24), stage_starts=(2, 4), stem_pool=stem_pool,
                   downsample_stages=(True, True))


class CnnOutput(NamedTuple):
    prediction: SegPrediction
    bn_stats: list[NormStats] | None


class CnnBackend:
    """Seeded random-weight CNN; ``running_stats`` start from training images."""

    def __init__(self, config: CnnConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng([seed, 2])
        self.params: dict[str, np.ndarray] = {}
        p = self.params
        c_in = 27  # 3x3 stem over RGB
        for i, c in enumerate(config.channels):
            bound = 1.0 / math.sqrt(c_in)
            p[f"conv{i}.w"] = rng.uniform(-bound, bound, (c_in, c)).astype(DTYPE)
            p[f"conv{i}.b"] = rng.uniform(-bound, bound, (c,)).astype(DTYPE)
            p[f"bn{i}.g"] = np.ones(c, DTYPE)
            p[f"bn{i}.b"] = np.zeros(c, DTYPE)
            c_in = c
        low = config.channels[(config.stage_starts[0] - 1)]
        for name, fan in (("head", c_in), ("skip", low)):
            bound = 1.0 / math.sqrt(fan)
            p[f"{name}.w"] = rng.uniform(-bound, bound, (fan, config.num_classes)).astype(DTYPE)
            p[f"{name}.b"] = rng.uniform(-bound, bound, (config.num_classes,)).astype(DTYPE)
        # training-time statistics, replaced by calibrate()
        self.running_stats: list[NormStats] = [NormStats(np.zeros(c), np.ones(c)) for c in config.channels]

    @property
    def num_bn_layers(self) -> int:
        return len(self.config.channels)

    def calibrate(self, images) -> list[NormStats]:
        """Set running statistics to the mean batch statistics of training images."""
        samples = [_forward(self, img, "batch")[1] for img in images]
        self.running_stats = mean_stats(samples)
        return self.running_stats

    def macs(self, height: int, width: int) -> int:
        cfg = self.config
        h, w = height // cfg.stem_pool, width // cfg.stem_pool
        total, c_in = 0, 27
        starts = dict(zip(cfg.stage_starts, cfg.downsample_stages))
        for i, c in enumerate(cfg.channels):
            if starts.get(i):
                h, w = max(1, h // 2), max(1, w // 2)
            total += h * w * c_in * c
            c_in = c
        return total


def _stem_input(image: np.ndarray, pool: int) -> np.ndarray:
    h, w = image.shape[0] // pool, image.shape[1] // pool
    if h < 1 or w < 1:
        raise ShapeError(f"image {image.shape[:2]} smaller than stem pool {pool}")
    x = image[: h * pool, : w * pool].reshape(h, pool, w, pool, 3).mean(axis=(1, 3))
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    cols = [padded[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=-1).astype(DTYPE)  # (h, w, 27)


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    if h < 2 or w < 2:
        return x
    h2, w2 = h // 2, w // 2
    return x[: h2 * 2, : w2 * 2].reshape(h2, 2, w2, 2, c).mean(axis=(1, 3))


def _forward(b: CnnBackend, image: np.ndarray, norm, taps: list | None = None) -> tuple[np.ndarray, list[NormStats]]:
    """Core pass. ``norm`` is ``"batch"`` (normalise by own stats) or a stat list.

    Pre-BN activations are appended to ``taps`` when it is given.
    """
    cfg, p = b.config, b.params
    x = _stem_input(image, cfg.stem_pool)
    starts = dict(zip(cfg.stage_starts, cfg.downsample_stages))
    low = None
    seen: list[NormStats] = []
    for i in range(len(cfg.channels)):
        if i == cfg.stage_starts[0]:
            low = x
        if starts.get(i):
            x = _pool2(x)
        z = x @ p[f"conv{i}.w"] + p[f"conv{i}.b"]
        if taps is not None:
            taps.append(z)
        flat = z.reshape(-1, z.shape[-1]).astype(np.float64)
        mean = flat.mean(axis=0)
        var = ((flat - mean) ** 2).mean(axis=0)
        seen.append(NormStats(mean, var))
        if norm != "batch":
            mean, var = norm[i].mean, norm[i].var
        scale = (p[f"bn{i}.g"] / np.sqrt(var + EPS)).astype(DTYPE)
        shift = (p[f"bn{i}.b"] - mean * scale).astype(DTYPE)
        x = np.maximum(z * scale + shift, 0.0)
    logits = x @ p["head.w"] + p["head.b"]
    logits = resize_nearest(logits, low.shape[0], low.shape[1]) + low @ p["skip.w"] + p["skip.b"]
    return logits.astype(DTYPE), seen


def cnn_forward(b: CnnBackend, image, mode: str = "frozen", adapted_bn: list[NormStats] | None = None) -> CnnOutput:
    """Segment an RGB patch at its own resolution.

    BN layers normalise with ``adapted_bn`` when given, else with the
    backend's running statistics. In ``collecting`` mode the per-layer batch
    statistics of this single input are returned alongside the prediction.
    """
    if mode not in FORWARD_MODES:
        raise ConfigError(f"mode must be one of {', '.join(FORWARD_MODES)}")
    image = np.asarray(image, dtype=DTYPE)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 image, got {image.shape}")
    stats = b.running_stats if adapted_bn is None else adapted_bn
    if len(stats) != b.num_bn_layers:
        raise ConfigError(f"expected {b.num_bn_layers} BN statistic sets, got {len(stats)}")
    for s, c in zip(stats, b.config.channels):
        if s.channels != c:
            raise ConfigError(f"BN layer has {c} channels but statistics carry {s.channels}")
    logits, seen = _forward(b, image, stats)
    logits -= logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    probs = resize_nearest(probs, image.shape[0], image.shape[1])
    pred = SegPrediction.from_class_probs(probs)
    return CnnOutput(pred, seen if mode == "collecting" else None)
