from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..numerics import DTYPE, softmax_rows


@dataclass(frozen=True, eq=False)
class SegPrediction:
    """Per-pixel labels with the probability of the winning class.

    ``class_probs`` optionally carries the full H×W×C distribution the labels
    were derived from.
    """

    labels: np.ndarray  # (h, w) uint16
    probs: np.ndarray  # (h, w) float32
    class_probs: np.ndarray | None = None

    def __post_init__(self):
        if self.labels.shape != self.probs.shape:
            raise ShapeError(f"labels {self.labels.shape} vs probs {self.probs.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @classmethod
    def from_class_probs(cls, class_probs: np.ndarray, keep: bool = True) -> "SegPrediction":
        # argmax returns the first maximum, i.e. ties go to the lowest class id
        labels = class_probs.argmax(axis=-1).astype(np.uint16)
        probs = np.take_along_axis(class_probs, labels[..., None].astype(np.intp), axis=-1)[..., 0]
        return cls(labels, np.clip(probs, 0.0, 1.0).astype(DTYPE), class_probs if keep else None)

    def __eq__(self, other):
        if not isinstance(other, SegPrediction):
            return NotImplemented
        return np.array_equal(self.labels, other.labels) and np.array_equal(self.probs, other.probs)


@dataclass(frozen=True, eq=False)
class AttentionStack:
    """Spatial attention maps: ``stages[k][b]`` is block ``b`` of stage ``k``."""

    stages: tuple[tuple[np.ndarray, np.ndarray], ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(blocks[0].shape[0] for blocks in self.stages)


def attention_scores(q, k, d: int) -> np.ndarray:
    """``softmax(q k^T / sqrt(d))`` for single-head attention."""
    q = np.asarray(q, dtype=DTYPE)
    k = np.asarray(k, dtype=DTYPE)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != d or k.shape[1] != d:
        raise ShapeError(f"q {q.shape} and k {k.shape} must both have {d} columns")
    return softmax_rows(q @ k.T / DTYPE(math.sqrt(d)))


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Attention output plus the mean over query rows of the score matrix.

    Rows are processed in chunks so the full n×n matrix never exists at once.
    """
    n, d = q.shape
    scale = DTYPE(1.0 / math.sqrt(d))
    out = np.empty((n, v.shape[1]), dtype=DTYPE)
    col = np.zeros(k.shape[0], dtype=np.float64)
    kt = np.ascontiguousarray(k.T)
    for s in range(0, n, chunk):
        scores = q[s:s + chunk] @ kt
        scores *= scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        col += scores.sum(axis=0, dtype=np.float64)
        out[s:s + chunk] = scores @ v
    return out, (col / n).astype(DTYPE)
