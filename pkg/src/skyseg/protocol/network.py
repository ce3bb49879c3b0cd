from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError


@dataclass(frozen=True)
class NetworkModel:
    """Link model: one-way delay ``rtt / 2``, fixed bandwidth, Bernoulli loss."""

    bandwidth: float = 10e6  # bytes per second
    rtt: float = 0.01  # seconds
    loss_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ParameterError("bandwidth must be positive")
        if self.rtt < 0:
            raise ParameterError("rtt must be non-negative")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ParameterError("loss_rate must lie in [0, 1]")

    def delivered(self, round_id: int, variant: int, sender: int, recipient: int) -> bool:
        """Whether one message survives the link; a pure function of its identity."""
        if self.loss_rate == 0.0:
            return True
        rng = np.random.default_rng([self.seed, round_id, variant, sender, recipient])
        return bool(rng.random() >= self.loss_rate)


def transmission_time(n_bytes: int, net: NetworkModel) -> float:
    if n_bytes < 0:
        raise ParameterError("byte count must be non-negative")
    return net.rtt / 2.0 + n_bytes / net.bandwidth
