"""Server side of buffered asynchronous FL: the update buffer, per-agent
staleness tracking, and the two aggregation strategies."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .mechanism import normalized_weights

__all__ = [
    "ClientUpdate",
    "StalenessTracker",
    "UpdateBuffer",
    "AggregationOutcome",
    "observe_staleness",
    "aggregate_fedstaleweight",
    "aggregate_fedavg_buffered",
    "aggregate",
    "STRATEGIES",
]

STRATEGIES = ("fedstaleweight", "fedavg")
ESTIMATOR_MODES = ("mean", "ema")


@dataclass
class ClientUpdate:
    delta: np.ndarray
    base_version: int
    agent_id: int
    produced_at: float = 0.0


class StalenessTracker:
    """Per-agent moving estimate of expected staleness.

    ``mode="mean"`` keeps the cumulative running mean of every observation;
    ``mode="ema"`` keeps ``est <- (1 - beta) * est + beta * tau``.  In both
    modes an agent's first observation becomes its estimate.
    """

    def __init__(self, mode: str = "mean", beta: float = 0.1):
        if mode not in ESTIMATOR_MODES:
            raise ValueError(f"unknown estimator mode {mode!r}; expected one of {ESTIMATOR_MODES}")
        if not 0 < beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        self.mode = mode
        self.beta = float(beta)
        self.counts: dict[int, int] = {}
        self.estimates: dict[int, float] = {}

    def observe(self, agent_id: int, staleness: float) -> float:
        if staleness < 0:
            raise ValueError(f"negative staleness {staleness} for agent {agent_id}")
        count = self.counts.get(agent_id, 0)
        if count == 0:
            est = float(staleness)
        elif self.mode == "mean":
            est = self.estimates[agent_id] + (staleness - self.estimates[agent_id]) / (count + 1)
        else:
            est = (1.0 - self.beta) * self.estimates[agent_id] + self.beta * staleness
        self.counts[agent_id] = count + 1
        self.estimates[agent_id] = est
        return est

    def estimate(self, agent_id: int) -> float:
        try:
            return self.estimates[agent_id]
        except KeyError:
            raise KeyError(f"no staleness observed yet for agent {agent_id}") from None

    def __contains__(self, agent_id: int) -> bool:
        return agent_id in self.estimates


class UpdateBuffer:
    """FIFO holding at most ``capacity`` updates between aggregations."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = int(capacity)
        self._items: list[ClientUpdate] = []

    def push(self, update: ClientUpdate) -> int:
        if len(self._items) >= self.capacity:
            # the engine must aggregate as soon as the buffer fills
            raise RuntimeError("push into a full buffer: aggregation was not triggered")
        self._items.append(update)
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) == self.capacity

    def drain(self) -> list[ClientUpdate]:
        items, self._items = self._items, []
        return items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[ClientUpdate]:
        return iter(list(self._items))


@dataclass
class AggregationOutcome:
    new_params: np.ndarray
    weights_applied: np.ndarray
    observed_stalenesses: np.ndarray
    version: int
    agent_ids: list = field(default_factory=list)


def observe_staleness(update: ClientUpdate, server_version: int, tracker: Optional[StalenessTracker] = None) -> int:
    """``server_version - base_version``, folded into ``tracker`` if given."""
    tau = int(server_version) - int(update.base_version)
    if tau < 0:
        raise ValueError(
            f"update from agent {update.agent_id} has base version {update.base_version} "
            f"ahead of server version {server_version}"
        )
    if tracker is not None:
        tracker.observe(update.agent_id, tau)
    return tau


def _apply(current: np.ndarray, buffer: Sequence[ClientUpdate], weights: np.ndarray, eta_g: float) -> np.ndarray:
    current = np.asarray(current, dtype=np.float64)
    step = np.zeros_like(current)
    for w, u in zip(weights, buffer):
        delta = np.asarray(u.delta, dtype=np.float64)
        if delta.shape != current.shape:
            raise ValueError(f"delta from agent {u.agent_id} has shape {delta.shape}, model has {current.shape}")
        step += w * delta
    return current + eta_g * step


def _check_full(buffer: Sequence[ClientUpdate], b: Optional[int]) -> None:
    if len(buffer) == 0 or (b is not None and len(buffer) != b):
        raise ValueError(f"aggregation needs a full buffer of {b} updates, got {len(buffer)}")


def aggregate_fedstaleweight(
    buffer: Sequence[ClientUpdate],
    tracker: StalenessTracker,
    current: np.ndarray,
    eta_g: float,
    n: int,
    server_version: int,
    b: Optional[int] = None,
    weight_form: str = "eq8",
) -> AggregationOutcome:
    """Staleness-weighted aggregation of one full buffer.

    Every update's staleness is folded into ``tracker`` first; the slot
    weights are then the normalized fair weights of the agents' current
    estimates.
    """
    buffer = list(buffer)
    _check_full(buffer, b)
    taus = np.array([observe_staleness(u, server_version, tracker) for u in buffer], dtype=np.int64)
    estimates = [tracker.estimate(u.agent_id) for u in buffer]
    weights = normalized_weights(estimates, len(buffer), n, weight_form=weight_form)
    return AggregationOutcome(
        new_params=_apply(current, buffer, weights, eta_g),
        weights_applied=weights,
        observed_stalenesses=taus,
        version=int(server_version) + 1,
        agent_ids=[u.agent_id for u in buffer],
    )


def aggregate_fedavg_buffered(
    buffer: Sequence[ClientUpdate],
    current: np.ndarray,
    eta_g: float,
    server_version: int = 0,
    b: Optional[int] = None,
    tracker: Optional[StalenessTracker] = None,
) -> AggregationOutcome:
    """Uniform ``1/b`` average of the buffered deltas."""
    buffer = list(buffer)
    _check_full(buffer, b)
    taus = np.array([observe_staleness(u, server_version, tracker) for u in buffer], dtype=np.int64)
    weights = np.full(len(buffer), 1.0 / len(buffer))
    return AggregationOutcome(
        new_params=_apply(current, buffer, weights, eta_g),
        weights_applied=weights,
        observed_stalenesses=taus,
        version=int(server_version) + 1,
        agent_ids=[u.agent_id for u in buffer],
    )


def aggregate(
    strategy: str,
    buffer: Sequence[ClientUpdate],
    tracker: StalenessTracker,
    current: np.ndarray,
    eta_g: float,
    n: int,
    server_version: int,
    weight_form: str = "eq8",
) -> AggregationOutcome:
    if strategy == "fedstaleweight":
        return aggregate_fedstaleweight(buffer, tracker, current, eta_g, n, server_version, weight_form=weight_form)
    if strategy == "fedavg":
        return aggregate_fedavg_buffered(buffer, current, eta_g, server_version, tracker=tracker)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
