"""Leader segmenter: a four-stage hierarchical transformer with layer norm.

Each stage merges 2×2 token neighbourhoods (a 4×4 patch embed for the first),
then runs two pre-norm blocks of single-head attention and an MLP. The
normalisation layers use one scalar mean/variance per sample, which is what
the leader adapts at test time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..errors import ConfigError, ShapeError
from ..numerics import DTYPE
from ..tta import NormStats, ln_batch_stats, mean_stats
from .prediction import AttentionStack, SegPrediction, attend

STAGE_DIMS = (64, 128, 160, 256)
BLOCKS_PER_STAGE = 2
EPS = 1e-5


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


@dataclass(frozen=True)
class TransformerConfig:
    num_classes: int
    input_size: int = 512
    patch: int = 4
    dim_divisor: int = 4
    mlp_ratio: int = 2

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(max(1, d // self.dim_divisor) for d in STAGE_DIMS)

    @property
    def grid_sizes(self) -> tuple[int, ...]:
        g = self.input_size // self.patch
        return (g, g // 2, g // 4, g // 8)

    @property
    def num_ln_layers(self) -> int:
        return len(STAGE_DIMS) * BLOCKS_PER_STAGE * 2

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.input_size % (self.patch * 8):
            raise ConfigError(f"input_size must be a multiple of {self.patch * 8}")


class TransformerOutput(NamedTuple):
    prediction: SegPrediction
    attention: AttentionStack
    ln_stats: list[NormStats]  # per-sample statistics seen at each LN layer


class TransformerBackend:
    """Seeded random-weight hierarchical transformer.

    ``ln_init`` holds the layer-norm statistics measured on training images;
    it seeds the test-time EMA and is ``None`` until :meth:`calibrate` runs.
    """

    def __init__(self, config: TransformerConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng([seed, 1])
        dims = config.dims
        self.params: dict[str, np.ndarray] = {}
        p = self.params
        in_dim = 3 * config.patch * config.patch
        for s, dim in enumerate(dims):
            p[f"s{s}.merge.w"] = _uniform(rng, in_dim, (in_dim, dim))
            p[f"s{s}.merge.b"] = _uniform(rng, in_dim, (dim,))
            for b in range(BLOCKS_PER_STAGE):
                pre = f"s{s}.b{b}"
                for name in ("q", "k", "v", "o"):
                    p[f"{pre}.{name}"] = _uniform(rng, dim, (dim, dim))
                hidden = dim * config.mlp_ratio
                p[f"{pre}.fc1.w"] = _uniform(rng, dim, (dim, hidden))
                p[f"{pre}.fc1.b"] = _uniform(rng, dim, (hidden,))
                p[f"{pre}.fc2.w"] = _uniform(rng, hidden, (hidden, dim))
                p[f"{pre}.fc2.b"] = _uniform(rng, hidden, (dim,))
                for ln in ("ln1", "ln2"):
                    p[f"{pre}.{ln}.g"] = np.ones(dim, DTYPE)
                    p[f"{pre}.{ln}.b"] = np.zeros(dim, DTYPE)
            p[f"head{s}.w"] = _uniform(rng, dim, (dim, config.num_classes))
            p[f"head{s}.b"] = _uniform(rng, dim, (config.num_classes,))
            in_dim = 4 * dim
        self.ln_init: list[NormStats] | None = None

    def calibrate(self, images) -> list[NormStats]:
        """Record mean per-sample LN statistics over training images."""
        samples = [transformer_forward(self, img).ln_stats for img in images]
        self.ln_init = mean_stats(samples)
        return self.ln_init

    def macs(self) -> int:
        cfg = self.config
        total = 0
        in_dim = 3 * cfg.patch * cfg.patch
        for n_side, dim in zip(cfg.grid_sizes, cfg.dims):
            n = n_side * n_side
            total += n * in_dim * dim
            per_block = 4 * n * dim * dim + 2 * n * n * dim + 2 * n * dim * dim * cfg.mlp_ratio
            total += BLOCKS_PER_STAGE * per_block + n * dim * cfg.num_classes
            in_dim = 4 * dim
        return total


def _merge_tokens(x: np.ndarray, side: int, f: int) -> np.ndarray:
    # (side*f, side*f, C) grid -> (side*side, f*f*C) tokens
    c = x.shape[-1]
    x = x.reshape(side, f, side, f, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(side * side, f * f * c)


def _layer_norm(x: np.ndarray, g, b, stats: NormStats | None) -> tuple[np.ndarray, NormStats]:
    mean, var = ln_batch_stats(x)
    seen = NormStats(mean, var)
    if stats is not None:
        mean, var = float(stats.mean[0]), float(stats.var[0])
    y = (x - DTYPE(mean)) * DTYPE(1.0 / math.sqrt(var + EPS))
    return y * g + b, seen


def transformer_forward(b: TransformerBackend, image, adapted_ln: list[NormStats] | None = None) -> TransformerOutput:
    """Segment one ``input_size``² RGB image.

    Without ``adapted_ln`` every LN layer normalises with the sample's own
    scalar statistics; with it, the supplied statistics are used instead.
    """
    cfg = b.config
    image = np.asarray(image, dtype=DTYPE)
    if image.shape != (cfg.input_size, cfg.input_size, 3):
        raise ShapeError(f"expected {cfg.input_size}x{cfg.input_size}x3 input, got {image.shape}")
    if adapted_ln is not None and len(adapted_ln) != cfg.num_ln_layers:
        raise ConfigError(f"expected {cfg.num_ln_layers} LN statistic sets, got {len(adapted_ln)}")
    p = b.params
    grid = image
    factor = cfg.patch
    stages = []
    seen: list[NormStats] = []
    head_side = cfg.grid_sizes[0]
    logits = np.zeros((head_side, head_side, cfg.num_classes), dtype=DTYPE)
    ln_index = 0
    for s, (side, dim) in enumerate(zip(cfg.grid_sizes, cfg.dims)):
        x = _merge_tokens(grid, side, factor) @ p[f"s{s}.merge.w"] + p[f"s{s}.merge.b"]
        maps = []
        for blk in range(BLOCKS_PER_STAGE):
            pre = f"s{s}.b{blk}"
            stats = None if adapted_ln is None else adapted_ln[ln_index]
            h, st = _layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], stats)
            seen.append(st)
            ln_index += 1
            out, col = attend(h @ p[f"{pre}.q"], h @ p[f"{pre}.k"], h @ p[f"{pre}.v"])
            x = x + out @ p[f"{pre}.o"]
            maps.append(col.reshape(side, side))
            stats = None if adapted_ln is None else adapted_ln[ln_index]
            h, st = _layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], stats)
            seen.append(st)
            ln_index += 1
            h = np.maximum(h @ p[f"{pre}.fc1.w"] + p[f"{pre}.fc1.b"], 0.0)
            x = x + h @ p[f"{pre}.fc2.w"] + p[f"{pre}.fc2.b"]
        stages.append((maps[0], maps[1]))
        stage_logits = (x @ p[f"head{s}.w"] + p[f"head{s}.b"]).reshape(side, side, -1)
        rep = head_side // side
        logits += np.repeat(np.repeat(stage_logits, rep, axis=0), rep, axis=1)
        grid = x.reshape(side, side, dim)
        factor = 2

    logits -= logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    up = cfg.input_size // head_side
    probs = np.repeat(np.repeat(probs, up, axis=0), up, axis=1)
    return TransformerOutput(SegPrediction.from_class_probs(probs), AttentionStack(tuple(stages)), seen)
