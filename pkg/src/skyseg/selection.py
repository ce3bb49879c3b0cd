"""Attention-based patch selection.

Per-stage block maps are averaged, pooled to a common 16×16 grid, mixed with
stage weights and pooled once more to a 2×2 grid of quadrant scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backends.prediction import AttentionStack
from .errors import ConfigError, ParameterError, ShapeError
from .numerics import DTYPE, avg_pool2d
from .world import GeoRect

SELECTION_METHODS = ("random", "order", "reorder", "attention")
MAX_PATCHES = 4
FUSED_SIZE = 16


@dataclass(frozen=True)
class SelectionWeights:
    w1: float = 0.1
    w2: float = 0.2
    w3: float = 0.3
    w4: float = 0.4

    def __post_init__(self):
        ws = self.as_tuple()
        if any(w < 0 for w in ws):
            raise ParameterError("selection weights must be non-negative")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise ParameterError(f"selection weights must sum to 1, got {sum(ws)}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.w1, self.w2, self.w3, self.w4


@dataclass(frozen=True)
class RankedPatch:
    index: int
    score: float
    rect: GeoRect


@dataclass(frozen=True)
class PatchRanking:
    final_map: np.ndarray | None
    ranked: tuple[RankedPatch, ...]

    @property
    def indices(self) -> list[int]:
        return [p.index for p in self.ranked]


def channel_merge(a1, a2) -> np.ndarray:
    a1 = np.asarray(a1, dtype=DTYPE)
    a2 = np.asarray(a2, dtype=DTYPE)
    if a1.shape != a2.shape:
        raise ShapeError(f"block maps differ in shape: {a1.shape} vs {a2.shape}")
    return (a1 + a2) / DTYPE(2)


def patch_merge(maps, fused_size: int = FUSED_SIZE) -> list[np.ndarray]:
    """Pool stages 1-3 with windows 8, 4, 2 so all four maps share stage 4's grid.

    ``fused_size`` is the expected stage-4 side; the default matches a 512²
    input (stages of 128², 64², 32², 16²).
    """
    maps = [np.asarray(m, dtype=DTYPE) for m in maps]
    if len(maps) != 4:
        raise ShapeError(f"expected 4 stage maps, got {len(maps)}")
    out = []
    for m, window in zip(maps, (8, 4, 2, 1)):
        expected = (fused_size * window, fused_size * window)
        if m.shape != expected:
            raise ShapeError(f"stage map {m.shape} != expected {expected}")
        out.append(m if window == 1 else avg_pool2d(m, window))
    return out


def weighted_fuse(maps, w: SelectionWeights) -> np.ndarray:
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if len(maps) != 4 or any(m.shape != maps[0].shape for m in maps):
        raise ShapeError("need four maps of identical shape")
    fused = sum(wi * m for wi, m in zip(w.as_tuple(), maps))
    return fused.astype(DTYPE)


def finalize(fused, fused_size: int = FUSED_SIZE) -> np.ndarray:
    """Average the fused map down to the 2×2 quadrant grid."""
    fused = np.asarray(fused, dtype=DTYPE)
    if fused.shape != (fused_size, fused_size) or fused_size % 2:
        raise ShapeError(f"fused map must be {fused_size}x{fused_size}, got {fused.shape}")
    return avg_pool2d(fused, fused_size // 2)


def attention_final_map(stack: AttentionStack, weights: SelectionWeights = SelectionWeights()) -> np.ndarray:
    merged = [channel_merge(a, b) for a, b in stack.stages]
    side = merged[-1].shape[0]
    return finalize(weighted_fuse(patch_merge(merged, fused_size=side), weights), fused_size=side)


def quadrant_rects(rect: GeoRect) -> list[GeoRect]:
    """Split ``rect`` at its midpoints; index order is TL, TR, BL, BR."""
    xm = (rect.x0 + rect.x1) // 2
    ym = (rect.y0 + rect.y1) // 2
    return [
        GeoRect(rect.x0, rect.y0, xm, ym),
        GeoRect(xm, rect.y0, rect.x1, ym),
        GeoRect(rect.x0, ym, xm, rect.y1),
        GeoRect(xm, ym, rect.x1, rect.y1),
    ]


def _check_k(k: int) -> None:
    if not 1 <= k <= MAX_PATCHES:
        raise ParameterError(f"k must be in 1..{MAX_PATCHES} (the 2x2 grid supports at most {MAX_PATCHES}), got {k}")


def select_patches(final, k: int, leader_rect: GeoRect) -> PatchRanking:
    """Top-``k`` quadrants by score; equal scores go to the lower index."""
    _check_k(k)
    final = np.asarray(final, dtype=DTYPE)
    if final.shape != (2, 2):
        raise ShapeError(f"final map must be 2x2, got {final.shape}")
    scores = final.ravel()
    order = sorted(range(4), key=lambda i: (-float(scores[i]), i))[:k]
    rects = quadrant_rects(leader_rect)
    ranked = tuple(RankedPatch(i, float(scores[i]), rects[i]) for i in order)
    return PatchRanking(final, ranked)


def baseline_ranking(method: str, k: int, leader_rect: GeoRect, rng: np.random.Generator | None = None) -> PatchRanking:
    """Non-attention comparators: ``random``, ``order`` (0,1,2,3) and ``reorder`` (3,2,1,0).

    Scores are synthetic and only encode the pick order.
    """
    _check_k(k)
    if method == "random":
        if rng is None:
            raise ParameterError("random selection needs an rng")
        order = [int(i) for i in rng.permutation(4)]
    elif method == "order":
        order = [0, 1, 2, 3]
    elif method == "reorder":
        order = [3, 2, 1, 0]
    else:
        raise ConfigError(f"unknown baseline {method!r}; allowed: random, order, reorder")
    rects = quadrant_rects(leader_rect)
    ranked = tuple(RankedPatch(i, float(4 - pos), rects[i]) for pos, i in enumerate(order[:k]))
    return PatchRanking(None, ranked)
