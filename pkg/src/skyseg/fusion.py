"""Merge the leader's upsampled coarse result with follower refinements."""

from __future__ import annotations

from .backends.prediction import SegPrediction
from .errors import ShapeError
from .world import GeoRect

FUSION_METHODS = ("replace", "prob")


def _check(coarse: SegPrediction, refinements) -> None:
    h, w = coarse.shape
    for rect, ref in refinements:
        if not rect.within(w, h):
            raise ShapeError(f"{rect} outside the {w}x{h} coarse grid")
        if ref.shape != rect.shape:
            raise ShapeError(f"refinement {ref.shape} does not match {rect} ({rect.shape})")


def replacement_fusion(coarse: SegPrediction, refinements: list[tuple[GeoRect, SegPrediction]]) -> SegPrediction:
    """Paste each refinement over its rect; later entries win where rects overlap."""
    _check(coarse, refinements)
    labels = coarse.labels.copy()
    probs = coarse.probs.copy()
    for rect, ref in refinements:
        labels[rect.slices] = ref.labels
        probs[rect.slices] = ref.probs
    return SegPrediction(labels, probs)


def probability_fusion(coarse: SegPrediction, refinements: list[tuple[GeoRect, SegPrediction]]) -> SegPrediction:
    """Inside each rect keep whichever label has the strictly higher probability.

    Ties keep the label already in place.
    """
    _check(coarse, refinements)
    labels = coarse.labels.copy()
    probs = coarse.probs.copy()
    for rect, ref in refinements:
        cur_l, cur_p = labels[rect.slices], probs[rect.slices]
        better = ref.probs > cur_p
        cur_l[better] = ref.labels[better]
        cur_p[better] = ref.probs[better]
    return SegPrediction(labels, probs)


def fuse(method: str, coarse: SegPrediction, refinements) -> SegPrediction:
    if method == "replace":
        return replacement_fusion(coarse, refinements)
    if method == "prob":
        return probability_fusion(coarse, refinements)
    raise ValueError(f"unknown fusion {method!r}; allowed: {', '.join(FUSION_METHODS)}")
