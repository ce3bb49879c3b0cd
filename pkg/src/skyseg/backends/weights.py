"""Weight files: ``SKYWGT1``, u32 array count, then per array u32 ndim,
u32 dims and little-endian f32 data, in the backend's layer order."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError, FrameError
from ..tta import NormStats
from .cnn import CnnBackend
from .transformer import TransformerBackend

MAGIC = b"SKYWGT1"


def _arrays(backend) -> list[tuple[str, np.ndarray]]:
    items = list(backend.params.items())
    stats = backend.running_stats if isinstance(backend, CnnBackend) else backend.ln_init
    for i, s in enumerate(stats or []):
        items.append((f"stats{i}.mean", s.mean))
        items.append((f"stats{i}.var", s.var))
    return items


def save_weights(backend, path) -> None:
    items = _arrays(backend)
    out = [MAGIC, struct.pack("<I", len(items))]
    for _, arr in items:
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_weights(backend, path) -> None:
    """Overwrite ``backend``'s parameters (and normalisation statistics) in place."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise FrameError("not a weight file")
    off = len(MAGIC)
    try:
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
            off += 4 + 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 4 * n > len(data):
                raise FrameError("weight file truncated")
            arrays.append(np.frombuffer(data, "<f4", n, off).reshape(shape).astype(np.float32))
            off += 4 * n
    except struct.error as exc:
        raise FrameError("weight file truncated") from exc

    names = list(backend.params)
    if len(arrays) < len(names):
        raise ConfigError("weight file has fewer arrays than the backend")
    for name, arr in zip(names, arrays):
        if arr.shape != backend.params[name].shape:
            raise ConfigError(f"{name}: shape {arr.shape} != {backend.params[name].shape}")
        backend.params[name] = arr
    rest = arrays[len(names):]
    if len(rest) % 2:
        raise ConfigError("dangling statistics array")
    stats = [NormStats(rest[i].astype(np.float64), rest[i + 1].astype(np.float64)) for i in range(0, len(rest), 2)]
    if isinstance(backend, CnnBackend):
        if stats:
            backend.running_stats = stats
    elif isinstance(backend, TransformerBackend):
        backend.ln_init = stats or None
