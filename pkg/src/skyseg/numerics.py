"""Small array kernel used by the rest of the package.

Tensors are plain row-major ``numpy.float32`` arrays; these helpers add the
shape checks and the handful of resampling rules the pipeline relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

DTYPE = np.float32


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def _require_rank(m: np.ndarray, rank: int, name: str = "input") -> None:
    if m.ndim != rank:
        raise ShapeError(f"{name} must be rank {rank}, got shape {m.shape}")


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax of a rank-2 array, stabilised by max subtraction."""
    m = np.asarray(m, dtype=DTYPE)
    _require_rank(m, 2)
    z = m - m.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    _require_rank(a, 2, "a")
    _require_rank(b, 2, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def avg_pool2d(m, window: int) -> np.ndarray:
    """Non-overlapping mean pooling of a rank-2 map."""
    m = np.asarray(m, dtype=DTYPE)
    _require_rank(m, 2)
    if window <= 0:
        raise ShapeError("window must be positive")
    h, w = m.shape
    if h % window or w % window:
        raise ShapeError(f"map {m.shape} not divisible by window {window}")
    return m.reshape(h // window, window, w // window, window).mean(axis=(1, 3), dtype=np.float64).astype(DTYPE)


def upsample_nearest(m, target_h: int, target_w: int) -> np.ndarray:
    """Replicate each cell of a 2-D (or H×W×C) grid into an integer-sized block.

    The dtype of ``m`` is kept, so label grids stay integer.
    """
    m = np.asarray(m)
    if m.ndim < 2:
        raise ShapeError(f"grid must be at least rank 2, got {m.shape}")
    h, w = m.shape[:2]
    if target_h % h or target_w % w:
        raise ShapeError(f"target {target_h}x{target_w} is not a multiple of {h}x{w}")
    fy, fx = target_h // h, target_w // w
    return np.repeat(np.repeat(m, fy, axis=0), fx, axis=1)


def downsample_majority(labels, factor: int, num_classes: int | None = None) -> np.ndarray:
    """Block-wise mode of a label grid; ties resolve to the lowest class id."""
    labels = np.asarray(labels)
    _require_rank(labels, 2, "labels")
    h, w = labels.shape
    if h % factor or w % factor:
        raise ShapeError(f"labels {labels.shape} not divisible by {factor}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    blocks = labels.reshape(h // factor, factor, w // factor, factor)
    counts = np.stack([(blocks == c).sum(axis=(1, 3)) for c in range(num_classes)])
    return counts.argmax(axis=0).astype(labels.dtype)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # row i holds the overlap of source cells with output cell i, normalised by its width
    edges_out = np.arange(n_out + 1, dtype=np.float64) * (n_in / n_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, n_in + 1)[None, :])
    return np.clip(hi - lo, 0.0, None) / (n_in / n_out)


def area_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-weighted resampling of an H×W or H×W×C image.

    Every source pixel contributes with equal total weight, so the global
    mean is preserved for any output size.
    """
    img = np.asarray(img, dtype=DTYPE)
    if img.ndim not in (2, 3):
        raise ShapeError(f"image must be rank 2 or 3, got {img.shape}")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    if h % out_h == 0 and w % out_w == 0:
        fy, fx = h // out_h, w // out_w
        shape = (out_h, fy, out_w, fx) + img.shape[2:]
        return img.reshape(shape).mean(axis=(1, 3), dtype=np.float64).astype(DTYPE)
    ry = _area_matrix(h, out_h)
    rx = _area_matrix(w, out_w)
    out = np.tensordot(ry, img.astype(np.float64), axes=(1, 0))
    out = np.tensordot(rx, out, axes=(1, 1)).swapaxes(0, 1)
    return out.astype(DTYPE)


def resize_nearest(grid, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resampling for arbitrary (non-integer) size ratios."""
    grid = np.asarray(grid)
    h, w = grid.shape[:2]
    iy = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    ix = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return grid[iy][:, ix]


def bilinear_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling with align-corners semantics, used for smooth noise fields."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]

    def weights(n_in, n_out):
        pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
        eye = np.eye(n_in)
        return np.stack([np.interp(pos, np.arange(n_in), eye[:, j]) for j in range(n_in)], axis=1)

    out = np.tensordot(weights(h, out_h), img, axes=(1, 0))
    out = np.tensordot(weights(w, out_w), out, axes=(1, 1)).swapaxes(0, 1)
    return out.astype(DTYPE)
