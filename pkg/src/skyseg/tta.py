"""Test-time adaptation of normalisation statistics.

The leader smooths scalar layer-norm statistics with an EMA. Followers keep
per-channel batch-norm statistics, pool them with whatever their peers sent
this round, and feed the pooled value through the same EMA.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError, StateError

AGGREGATE_MODES = ("mean", "sum")
DEFAULT_ALPHA = 0.05


@dataclass(frozen=True, eq=False)
class NormStats:
    """Mean/variance pair for one normalisation layer.

    Held in float64; forward passes cast to float32 on use.
    """

    mean: np.ndarray
    var: np.ndarray
    t: int = 0

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.var, dtype=np.float64))
        if mean.shape != var.shape or mean.ndim != 1:
            raise ShapeError(f"mean {mean.shape} and var {var.shape} must be equal-length vectors")
        if np.any(var < 0):
            raise ParameterError("variance must be non-negative")
        mean.flags.writeable = False
        var.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def __eq__(self, other):
        if not isinstance(other, NormStats):
            return NotImplemented
        return self.t == other.t and np.array_equal(self.mean, other.mean) and np.array_equal(self.var, other.var)


def ln_batch_stats(x) -> tuple[float, float]:
    """Scalar mean and population variance over every element of a C×H×W map."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("empty tensor")
    mean = x.mean()
    return float(mean), float(((x - mean) ** 2).mean())


def bn_batch_stats(x) -> NormStats:
    """Per-channel spatial statistics of a 1×C×H×W activation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[2] * x.shape[3] == 0:
        raise ShapeError(f"expected 1xCxHxW, got {x.shape}")
    flat = x[0].reshape(x.shape[1], -1)
    mean = flat.mean(axis=1)
    var = ((flat - mean[:, None]) ** 2).mean(axis=1)
    return NormStats(mean, var)


def _check_layout(a: NormStats, b: NormStats) -> None:
    if a.channels != b.channels:
        raise ConfigError(f"channel layout mismatch: {a.channels} vs {b.channels}")


def ema_update(prev: NormStats, incoming: NormStats, alpha: float) -> NormStats:
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    _check_layout(prev, incoming)
    mean = (1.0 - alpha) * prev.mean + alpha * incoming.mean
    var = (1.0 - alpha) * prev.var + alpha * incoming.var
    return NormStats(mean, np.maximum(var, 0.0), prev.t + 1)


def _check_layers(a: list[NormStats], b: list[NormStats]) -> None:
    if len(a) != len(b):
        raise ConfigError(f"layer count mismatch: {len(a)} vs {len(b)}")
    for x, y in zip(a, b):
        _check_layout(x, y)


@dataclass
class MemoryBank:
    """Per-device store of adaptation state.

    ``running`` is the device's adapted statistics, ``peers`` the latest
    per-layer statistics received from each peer this round and ``local`` the
    device's own contribution for the round.
    """

    running: list[NormStats]
    alpha: float = DEFAULT_ALPHA
    owner: int = 0
    aggregate: str = "mean"
    peers: dict[int, list[NormStats]] = field(default_factory=dict)
    local: list[NormStats] | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.aggregate not in AGGREGATE_MODES:
            raise ConfigError(f"aggregate must be one of {', '.join(AGGREGATE_MODES)}")

    def store(self, peer_id: int, stats: list[NormStats]) -> None:
        if peer_id == self.owner:
            raise ParameterError("a device cannot store itself as a peer")
        _check_layers(self.running, stats)
        self.peers[peer_id] = list(stats)

    def clear_round(self) -> None:
        self.peers.clear()
        self.local = None


def aggregate_peers(bank: MemoryBank, local: list[NormStats] | None) -> list[NormStats]:
    """Pool local and peer statistics layer by layer.

    Entries are combined in ascending device-id order, which makes the result
    independent of arrival order down to the last bit.
    """
    entries: dict[int, list[NormStats]] = dict(bank.peers)
    if local is not None:
        entries[bank.owner] = local
    if not entries:
        raise StateError("nothing to aggregate: no local or peer statistics")
    ordered = [entries[i] for i in sorted(entries)]
    for stats in ordered[1:]:
        _check_layers(ordered[0], stats)
    n = len(ordered)
    pooled = []
    for layer in range(len(ordered[0])):
        mean = np.zeros(ordered[0][layer].channels)
        var = np.zeros_like(mean)
        for stats in ordered:
            mean = mean + stats[layer].mean
            var = var + stats[layer].var
        if bank.aggregate == "mean":
            mean, var = mean / n, var / n
        pooled.append(NormStats(mean, var))
    return pooled


def adapt_step_leader(model_stats: list[NormStats] | None, batch_stats: list[NormStats], alpha: float) -> list[NormStats]:
    """One EMA step of the leader's layer-norm statistics."""
    if model_stats is None:
        raise StateError("leader statistics were never initialised from training data")
    _check_layers(model_stats, batch_stats)
    return [ema_update(p, b, alpha) for p, b in zip(model_stats, batch_stats)]


def adapt_step_follower(bank: MemoryBank, local: list[NormStats] | None, alpha: float | None = None) -> list[NormStats]:
    """Aggregate this round's statistics, advance the EMA and reset the round buffers.

    ``alpha`` defaults to the bank's coefficient.
    """
    if local is not None:
        _check_layers(bank.running, local)
    alpha = bank.alpha if alpha is None else alpha
    pooled = aggregate_peers(bank, local)
    bank.running = [ema_update(p, b, alpha) for p, b in zip(bank.running, pooled)]
    bank.clear_round()
    return bank.running


def mean_stats(samples: list[list[NormStats]]) -> list[NormStats]:
    """Average several per-layer statistic sets, e.g. over a calibration set."""
    if not samples:
        raise StateError("no samples")
    out = []
    for layer in zip(*samples):
        out.append(NormStats(np.mean([s.mean for s in layer], axis=0), np.mean([s.var for s in layer], axis=0)))
    return out
