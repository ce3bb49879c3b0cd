"""Synthetic scenes, the two camera models and parametric weather corruption."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BoundsError, FrameError, ParameterError, ShapeError
from .numerics import DTYPE, area_resize, bilinear_resize

CORRUPTIONS = ("snow", "fog", "frost")
MAX_SEVERITY = 5

_SCENE_MAGIC = b"SKYSCN1"


@dataclass(frozen=True)
class GeoTransform:
    """Affine map from scene pixels to world coordinates.

    ``x = a + b*col + c*row`` and ``y = d + e*col + f*row``.
    """

    a: float = 0.0
    b: float = 1.0
    c: float = 0.0
    d: float = 0.0
    e: float = 0.0
    f: float = 1.0

    def __post_init__(self):
        if abs(self.determinant) < 1e-12:
            raise ParameterError("geo transform is not invertible")

    @property
    def determinant(self) -> float:
        return self.b * self.f - self.c * self.e

    def to_geo(self, col: float, row: float) -> tuple[float, float]:
        return self.a + self.b * col + self.c * row, self.d + self.e * col + self.f * row

    def to_pixel(self, x: float, y: float) -> tuple[float, float]:
        dx, dy = x - self.a, y - self.d
        det = self.determinant
        return (self.f * dx - self.c * dy) / det, (self.b * dy - self.e * dx) / det


@dataclass(frozen=True)
class GeoRect:
    """Axis-aligned region in scene pixels, half-open on the high side."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ParameterError(f"degenerate rect {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def within(self, width: int, height: int) -> bool:
        return 0 <= self.x0 and 0 <= self.y0 and self.x1 <= width and self.y1 <= height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x0, self.y0, self.x1, self.y1


@dataclass(frozen=True, eq=False)
class Scene:
    labels: np.ndarray  # (height, width) uint16
    image: np.ndarray  # (height, width, 3) float32 in [0, 1]
    num_classes: int
    geo: GeoTransform = field(default_factory=GeoTransform)
    # regions that are hard to segment from altitude; oracle leaders lose accuracy there
    hotspots: tuple[GeoRect, ...] = ()

    def __post_init__(self):
        if self.labels.shape != self.image.shape[:2] or self.image.shape[2:] != (3,):
            raise ShapeError("labels and image dims disagree")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ParameterError("label id out of range")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def rect(self) -> GeoRect:
        return GeoRect(0, 0, self.width, self.height)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.geo == other.geo
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.image, other.image)
        )


@dataclass(frozen=True, eq=False)
class Observation:
    image: np.ndarray  # (h, w, 3) float32
    source_rect: GeoRect
    resolution_tag: str  # "low" | "high"


def generate_scene(seed: int, width: int, height: int, num_classes: int, regions: int | None = None) -> Scene:
    """Voronoi-partitioned label map with class-correlated colours.

    The first ``num_classes`` regions cycle through every class so each class
    is present whenever there are at least that many regions.
    """
    if width <= 0 or height <= 0:
        raise ParameterError("scene dims must be positive")
    if num_classes < 2:
        raise ParameterError("need at least two classes")
    if regions is None:
        regions = max(4 * num_classes, 16)
    regions = max(regions, num_classes)
    rng = np.random.default_rng(seed)

    sites = rng.uniform((0, 0), (width, height), size=(regions, 2)).astype(np.float32)
    site_class = np.concatenate([rng.permutation(num_classes), rng.integers(0, num_classes, regions - num_classes)])

    xs = np.arange(width, dtype=np.float32) + 0.5
    labels = np.empty((height, width), dtype=np.uint16)
    region_of = np.empty((height, width), dtype=np.int64)
    for row in range(0, height, 64):
        ys = np.arange(row, min(row + 64, height), dtype=np.float32)[:, None, None] + 0.5
        d2 = (xs[None, :, None] - sites[None, None, :, 0]) ** 2 + (ys - sites[None, None, :, 1]) ** 2
        nearest = d2.argmin(axis=2)
        region_of[row:row + 64] = nearest
        labels[row:row + 64] = site_class[nearest]

    palette = rng.uniform(0.1, 0.9, size=(num_classes, 3))
    jitter = rng.normal(0.0, 0.04, size=(regions, 3))
    colour = palette[site_class] + jitter
    image = colour[region_of] + rng.normal(0.0, 0.03, size=(height, width, 3))
    image = np.clip(image, 0.0, 1.0).astype(DTYPE)
    return Scene(labels=labels, image=image, num_classes=num_classes)


def leader_capture(scene: Scene, target_h: int, target_w: int) -> Observation:
    """Wide-area low-definition view: the whole scene area-averaged to the target size."""
    if target_h > scene.height or target_w > scene.width or target_h <= 0 or target_w <= 0:
        raise ParameterError(f"target {target_h}x{target_w} exceeds scene {scene.height}x{scene.width}")
    return Observation(area_resize(scene.image, target_h, target_w), scene.rect, "low")


def follower_capture(scene: Scene, rect: GeoRect) -> Observation:
    if not rect.within(scene.width, scene.height):
        raise BoundsError(f"{rect} outside {scene.width}x{scene.height} scene")
    return Observation(scene.image[rect.slices].copy(), rect, "high")


def apply_corruption(obs: Observation, kind: str, severity: int, seed: int) -> Observation:
    """Degrade an observation with fog, snow or frost at severity 0..5.

    * fog:   ``x' = x(1 - t) + t`` with ``t = 0.12 * severity``
    * snow:  brightness lift of ``0.05 * severity`` then white speckles on a
      ``0.02 * severity`` fraction of pixels
    * frost: multiplicative low-frequency texture ``x' = x(1 + a*n)``, ``n`` in
      [-1, 1], ``a = 0.08 * severity``
    """
    if kind not in CORRUPTIONS:
        raise ParameterError(f"unknown corruption {kind!r}; allowed: {', '.join(CORRUPTIONS)}")
    if not 0 <= severity <= MAX_SEVERITY or int(severity) != severity:
        raise ParameterError(f"severity must be an integer in [0, {MAX_SEVERITY}], got {severity}")
    if severity == 0:
        return replace(obs, image=obs.image.copy())
    rng = np.random.default_rng([seed, CORRUPTIONS.index(kind), severity])
    x = obs.image.astype(np.float64)
    h, w = x.shape[:2]
    if kind == "fog":
        t = 0.12 * severity
        x = x * (1.0 - t) + t
    elif kind == "snow":
        x = x + 0.05 * severity
        flakes = rng.random((h, w)) < 0.02 * severity
        x[flakes] = 1.0
    else:
        coarse = rng.uniform(-1.0, 1.0, size=(max(2, h // 32 + 1), max(2, w // 32 + 1)))
        noise = bilinear_resize(coarse, h, w).astype(np.float64)
        x = x * (1.0 + 0.08 * severity * noise[..., None])
    return replace(obs, image=np.clip(x, 0.0, 1.0).astype(DTYPE))


def save_scene(scene: Scene, path) -> None:
    """Write ``SKYSCN1`` + u32 width, height, num_classes, u16 labels, f32 RGB."""
    header = _SCENE_MAGIC + struct.pack("<III", scene.width, scene.height, scene.num_classes)
    body = scene.labels.astype("<u2").tobytes() + scene.image.astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_scene(path) -> Scene:
    data = Path(path).read_bytes()
    n = len(_SCENE_MAGIC)
    if data[:n] != _SCENE_MAGIC or len(data) < n + 12:
        raise FrameError("not a scene file")
    width, height, num_classes = struct.unpack_from("<III", data, n)
    off = n + 12
    n_px = width * height
    if len(data) != off + n_px * 2 + n_px * 12:
        raise FrameError("scene file truncated")
    labels = np.frombuffer(data, "<u2", n_px, off).reshape(height, width).astype(np.uint16)
    image = np.frombuffer(data, "<f4", n_px * 3, off + n_px * 2).reshape(height, width, 3).astype(DTYPE)
    return Scene(labels=labels, image=image, num_classes=num_classes)
