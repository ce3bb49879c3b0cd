"""Leader/follower wire messages and their little-endian frame codec.

Every frame starts with a 16-byte header::

    offset  size  field
    0       4     magic b"SKYM"
    4       1     variant
    5       1     sender id
    6       1     recipient id
    7       1     patch index (Refinement only, else 0)
    8       4     round id (u32)
    12      4     payload length (u32)

Payloads:

* TaskAssign:  u32 count, then per rect u32 patch, x0, y0, x1, y1
* Refinement:  h*w u16 labels then h*w f32 probabilities, row-major
* StatShare:   per layer u32 channels, binary16 means, binary16 variances
* FinalResult: u32 h, u32 w, then labels and probabilities as in Refinement
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from ..backends.prediction import SegPrediction
from ..errors import EncodingError, FrameError
from ..tta import NormStats
from ..world import GeoRect

MAGIC = b"SKYM"
HEADER = struct.Struct("<4sBBBBII")
HEADER_SIZE = HEADER.size  # 16

LEADER_ID = 0
GROUND_ID = 255

TASK_ASSIGN, REFINEMENT, STAT_SHARE, FINAL_RESULT = 1, 2, 3, 4


@dataclass(frozen=True)
class TaskAssign:
    round_id: int
    rects: tuple[GeoRect, ...]
    patch_ids: tuple[int, ...]
    sender: int = LEADER_ID
    recipient: int = 1


@dataclass(frozen=True, eq=False)
class Refinement:
    round_id: int
    patch_index: int
    labels: np.ndarray
    probs: np.ndarray
    sender: int = 1
    recipient: int = LEADER_ID

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def prediction(self) -> SegPrediction:
        return SegPrediction(self.labels, self.probs)

    def __eq__(self, other):
        if not isinstance(other, Refinement):
            return NotImplemented
        return (
            (self.round_id, self.patch_index, self.sender, self.recipient)
            == (other.round_id, other.patch_index, other.sender, other.recipient)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.probs, other.probs)
        )


@dataclass(frozen=True, eq=False)
class StatShare:
    round_id: int
    layers: tuple[NormStats, ...]
    sender: int = 1
    recipient: int = 2

    @property
    def peer_id(self) -> int:
        return self.sender

    @property
    def total_channels(self) -> int:
        return sum(s.channels for s in self.layers)

    def __eq__(self, other):
        if not isinstance(other, StatShare):
            return NotImplemented
        return (self.round_id, self.sender, self.recipient) == (other.round_id, other.sender, other.recipient) and list(
            self.layers
        ) == list(other.layers)


@dataclass(frozen=True, eq=False)
class FinalResult:
    round_id: int
    labels: np.ndarray
    probs: np.ndarray
    sender: int = LEADER_ID
    recipient: int = GROUND_ID

    def __eq__(self, other):
        if not isinstance(other, FinalResult):
            return NotImplemented
        return (
            (self.round_id, self.sender, self.recipient) == (other.round_id, other.sender, other.recipient)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.probs, other.probs)
        )


Message = Union[TaskAssign, Refinement, StatShare, FinalResult]
VARIANTS = {TaskAssign: TASK_ASSIGN, Refinement: REFINEMENT, StatShare: STAT_SHARE, FinalResult: FINAL_RESULT}


def quantize_half(x) -> np.ndarray:
    """Round-trip values through binary16, the wire precision of statistics."""
    return np.asarray(x, dtype=np.float64).astype("<f2").astype(np.float64)


def _check_u8(name: str, v: int) -> None:
    if not 0 <= v <= 255:
        raise EncodingError(f"{name} {v} does not fit in u8")


def _grid_bytes(labels, probs) -> bytes:
    labels = np.asarray(labels)
    probs = np.asarray(probs)
    if labels.shape != probs.shape or labels.ndim != 2:
        raise EncodingError("labels and probs must be equal 2-D grids")
    if labels.size and (labels.min() < 0 or labels.max() >= 65536):
        raise EncodingError("label does not fit in u16")
    return labels.astype("<u2").tobytes() + probs.astype("<f4").tobytes()


def _half_bytes(values: np.ndarray) -> bytes:
    with np.errstate(over="ignore"):
        half = np.asarray(values, dtype=np.float64).astype("<f2")
    if not np.all(np.isfinite(half)):
        raise EncodingError("statistic outside binary16 range")
    return half.tobytes()


def encode_payload(msg: Message) -> bytes:
    if isinstance(msg, TaskAssign):
        if len(msg.rects) != len(msg.patch_ids):
            raise EncodingError("rects and patch_ids differ in length")
        parts = [struct.pack("<I", len(msg.rects))]
        for pid, r in zip(msg.patch_ids, msg.rects):
            if min(r.as_tuple()) < 0:
                raise EncodingError("rect coordinates must be non-negative")
            parts.append(struct.pack("<5I", pid, *r.as_tuple()))
        return b"".join(parts)
    if isinstance(msg, Refinement):
        return _grid_bytes(msg.labels, msg.probs)
    if isinstance(msg, StatShare):
        parts = []
        for s in msg.layers:
            parts.append(struct.pack("<I", s.channels))
            parts.append(_half_bytes(s.mean))
            parts.append(_half_bytes(s.var))
        return b"".join(parts)
    if isinstance(msg, FinalResult):
        h, w = np.asarray(msg.labels).shape
        return struct.pack("<II", h, w) + _grid_bytes(msg.labels, msg.probs)
    raise EncodingError(f"not a message: {type(msg).__name__}")


def encode(msg: Message) -> bytes:
    _check_u8("sender", msg.sender)
    _check_u8("recipient", msg.recipient)
    patch = msg.patch_index if isinstance(msg, Refinement) else 0
    _check_u8("patch index", patch)
    if not 0 <= msg.round_id < 2**32:
        raise EncodingError("round id does not fit in u32")
    payload = encode_payload(msg)
    header = HEADER.pack(MAGIC, VARIANTS[type(msg)], msg.sender, msg.recipient, patch, msg.round_id, len(payload))
    return header + payload


def payload_breakdown(msg: Message) -> tuple[int, int]:
    """``(data bytes, framing bytes)`` of the payload.

    Data bytes are what the volume figures count (labels + probabilities, or
    2+2 bytes per channel); framing is the per-layer channel-count words.
    """
    if isinstance(msg, StatShare):
        return 4 * msg.total_channels, 4 * len(msg.layers)
    return len(encode_payload(msg)), 0


def _grid_from(payload: bytes, off: int, h: int, w: int):
    n = h * w
    if len(payload) - off != n * 6:
        raise FrameError(f"grid payload is {len(payload) - off} bytes, expected {n * 6}")
    labels = np.frombuffer(payload, "<u2", n, off).reshape(h, w).astype(np.uint16)
    probs = np.frombuffer(payload, "<f4", n, off + 2 * n).reshape(h, w).astype(np.float32)
    return labels, probs


def decode(frame: bytes, patch_shapes: Mapping[int, tuple[int, int]] | None = None) -> Message:
    """Parse one frame.

    A Refinement payload carries no dimensions; they follow from the rect the
    leader assigned, so ``patch_shapes`` must map the frame's patch index to
    ``(h, w)``.
    """
    frame = bytes(frame)
    if len(frame) < HEADER_SIZE:
        raise FrameError("truncated header")
    magic, variant, sender, recipient, patch, round_id, length = HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if len(frame) != HEADER_SIZE + length:
        raise FrameError(f"frame holds {len(frame) - HEADER_SIZE} payload bytes, header says {length}")
    payload = frame[HEADER_SIZE:]
    try:
        if variant == TASK_ASSIGN:
            (count,) = struct.unpack_from("<I", payload)
            if length != 4 + 20 * count:
                raise FrameError("TaskAssign length mismatch")
            rows = [struct.unpack_from("<5I", payload, 4 + 20 * i) for i in range(count)]
            return TaskAssign(round_id, tuple(GeoRect(*r[1:]) for r in rows), tuple(r[0] for r in rows), sender, recipient)
        if variant == REFINEMENT:
            if patch_shapes is None or patch not in patch_shapes:
                raise FrameError(f"no known shape for patch {patch}")
            labels, probs = _grid_from(payload, 0, *patch_shapes[patch])
            return Refinement(round_id, patch, labels, probs, sender, recipient)
        if variant == STAT_SHARE:
            layers, off = [], 0
            while off < length:
                (c,) = struct.unpack_from("<I", payload, off)
                off += 4
                if off + 4 * c > length:
                    raise FrameError("StatShare layer truncated")
                mean = np.frombuffer(payload, "<f2", c, off).astype(np.float64)
                var = np.frombuffer(payload, "<f2", c, off + 2 * c).astype(np.float64)
                layers.append(NormStats(mean, var))
                off += 4 * c
            return StatShare(round_id, tuple(layers), sender, recipient)
        if variant == FINAL_RESULT:
            h, w = struct.unpack_from("<II", payload)
            labels, probs = _grid_from(payload, 8, h, w)
            return FinalResult(round_id, labels, probs, sender, recipient)
    except struct.error as exc:
        raise FrameError("payload truncated") from exc
    raise FrameError(f"unknown variant {variant}")
