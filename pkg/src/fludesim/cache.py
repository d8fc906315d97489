"""Rolling per-device model cache with staleness bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ProtocolError(RuntimeError):
    """A device was asked to train without any parameters to start from."""


@dataclass(frozen=True)
class CacheEntry:
    params: np.ndarray
    processed_samples: int
    total_samples: int
    learning_rate: float
    cached_round: int
    cached_clock: float
    pass_round: int  # round whose shuffle order the interrupted pass follows

    def __post_init__(self):
        if not 0 <= self.processed_samples <= self.total_samples:
            raise ValueError("processed_samples must lie in [0, total_samples]")

    @property
    def remaining(self) -> int:
        return self.total_samples - self.processed_samples


@dataclass(frozen=True)
class StartState:
    params: np.ndarray
    offset: int
    pass_round: int
    fresh: bool


class ModelCache:
    """At most one entry per device; a new checkpoint discards the old one."""

    def __init__(self):
        self._entries: dict[int, CacheEntry] = {}

    def checkpoint(self, device_id: int, entry: CacheEntry) -> None:
        self._entries[device_id] = CacheEntry(
            params=np.array(entry.params, dtype=np.float32, copy=True),
            processed_samples=entry.processed_samples,
            total_samples=entry.total_samples,
            learning_rate=entry.learning_rate,
            cached_round=entry.cached_round,
            cached_clock=entry.cached_clock,
            pass_round=entry.pass_round,
        )

    def get(self, device_id: int) -> CacheEntry | None:
        return self._entries.get(device_id)

    def has(self, device_id: int) -> bool:
        return device_id in self._entries

    def clear(self, device_id: int) -> None:
        self._entries.pop(device_id, None)

    def staleness(self, device_id: int, current_round: int) -> int:
        entry = self._entries[device_id]
        if entry.cached_round > current_round:
            raise ValueError("cache entry is from the future")
        return current_round - entry.cached_round

    def status(self, device_ids, current_round: int) -> dict[int, int | None]:
        """Per-device report: staleness in rounds, or None without a cache."""
        return {
            i: (self.staleness(i, current_round) if i in self._entries else None)
            for i in device_ids
        }

    def items(self):
        return sorted(self._entries.items())

    def __len__(self) -> int:
        return len(self._entries)


def resume_or_fresh(
    cache: ModelCache,
    device_id: int,
    current_round: int,
    received_fresh_global: bool,
    global_params: np.ndarray | None = None,
) -> StartState:
    if received_fresh_global:
        if global_params is None:
            raise ProtocolError("fresh start requested without global parameters")
        cache.clear(device_id)
        return StartState(np.asarray(global_params, dtype=np.float32), 0, current_round, True)
    entry = cache.get(device_id)
    if entry is None:
        raise ProtocolError(f"device {device_id} has neither a cache nor a fresh global model")
    return StartState(entry.params, entry.processed_samples, entry.pass_round, False)


def caching_interval(battery_proxy: float, network_stability_proxy: float, base_interval: float) -> float:
    """Seconds between checkpoints: 0.5x base for a failing device up to 5x when stable."""
    if base_interval <= 0:
        raise ValueError("base_interval must be > 0")
    b = min(max(battery_proxy, 0.0), 1.0)
    n = min(max(network_stability_proxy, 0.0), 1.0)
    return base_interval * (0.5 + 4.5 * b * n)


def default_tick(total_samples: int, ticks_per_pass: int = 10) -> int:
    return max(1, math.ceil(total_samples / ticks_per_pass))
