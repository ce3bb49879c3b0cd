"""Controlled-accuracy stand-ins for the learned segmenters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError
from ..numerics import DTYPE, area_resize, downsample_majority, resize_nearest
from ..world import GeoRect, Scene
from .prediction import AttentionStack, SegPrediction


def _ground_truth(scene: Scene, rect: GeoRect, out_shape) -> np.ndarray:
    gt = scene.labels[rect.slices]
    if out_shape is None or tuple(out_shape) == gt.shape:
        return gt
    h, w = out_shape
    if gt.shape[0] % h == 0 and gt.shape[1] % w == 0 and gt.shape[0] // h == gt.shape[1] // w:
        return downsample_majority(gt, gt.shape[0] // h, scene.num_classes)
    return resize_nearest(gt, h, w)


def oracle_forward(scene: Scene, rect: GeoRect, accuracy, confidence: float, seed, out_shape=None) -> SegPrediction:
    """Ground truth corrupted at a controlled per-pixel rate.

    Each pixel keeps its true label with probability ``accuracy`` (a scalar or
    a per-pixel array of ``out_shape``); otherwise a wrong class is drawn
    uniformly. Every pixel reports probability ``confidence``.
    """
    if not 0.0 <= confidence <= 1.0:
        raise ParameterError("confidence must lie in [0, 1]")
    accuracy = np.asarray(accuracy, dtype=np.float64)
    if np.any(accuracy < 0.0) or np.any(accuracy > 1.0):
        raise ParameterError("accuracy must lie in [0, 1]")
    gt = _ground_truth(scene, rect, out_shape).astype(np.int64)
    rng = np.random.default_rng(seed)
    wrong = rng.random(gt.shape) >= accuracy
    offset = rng.integers(1, scene.num_classes, size=gt.shape)
    labels = np.where(wrong, (gt + offset) % scene.num_classes, gt).astype(np.uint16)
    return SegPrediction(labels, np.full(gt.shape, confidence, dtype=DTYPE))


@dataclass(frozen=True)
class OracleBackend:
    """Oracle segmenter with optional low-accuracy hotspots.

    Accuracy drops to ``hotspot_accuracy`` inside ``hotspots``, and inside the
    scene's own hotspot regions when ``scene_hotspots`` is set. Scene hotspots
    stand for areas that are hard at the leader's ground resolution, so only
    the leader's oracle normally honours them. The backend also emits an
    attention stack concentrated where its own error rate is high, the way a
    trained model's attention tracks hard regions.
    """

    accuracy: float
    confidence: float
    hotspots: tuple[GeoRect, ...] = ()
    hotspot_accuracy: float = 0.3
    attention_sharpness: float = 4.0
    attention_noise: float = 0.1
    stage_sizes: tuple[int, ...] = (128, 64, 32, 16)
    latency: float = 0.0  # seconds of simulated compute per call
    scene_hotspots: bool = False

    def accuracy_map(self, scene: Scene, rect: GeoRect, out_shape) -> np.ndarray:
        h, w = out_shape
        acc = np.full((h, w), self.accuracy)
        sy, sx = h / rect.height, w / rect.width
        regions = self.hotspots + (tuple(scene.hotspots) if self.scene_hotspots else ())
        for hs in regions:
            y0 = int(round((max(hs.y0, rect.y0) - rect.y0) * sy))
            y1 = int(round((min(hs.y1, rect.y1) - rect.y0) * sy))
            x0 = int(round((max(hs.x0, rect.x0) - rect.x0) * sx))
            x1 = int(round((min(hs.x1, rect.x1) - rect.x0) * sx))
            if y1 > y0 and x1 > x0:
                acc[y0:y1, x0:x1] = self.hotspot_accuracy
        return acc

    def predict(self, scene: Scene, rect: GeoRect, seed, out_shape=None) -> SegPrediction:
        shape = rect.shape if out_shape is None else tuple(out_shape)
        return oracle_forward(scene, rect, self.accuracy_map(scene, rect, shape), self.confidence, seed, shape)

    def attention(self, scene: Scene, rect: GeoRect, seed) -> AttentionStack:
        err = 1.0 - self.accuracy_map(scene, rect, rect.shape)
        rng = np.random.default_rng(seed)
        stages = []
        for size in self.stage_sizes:
            base = area_resize(err, size, size).astype(np.float64) * self.attention_sharpness
            blocks = []
            for _ in range(2):
                logits = base + rng.normal(0.0, self.attention_noise, base.shape)
                m = np.exp(logits - logits.max())
                blocks.append((m / m.sum()).astype(DTYPE))
            stages.append(tuple(blocks))
        return AttentionStack(tuple(stages))
