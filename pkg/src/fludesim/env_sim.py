"""Simulated device population, churn, bandwidth and the virtual clock."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fludesim.rng import RngStream

CAPABILITY_CLASSES = ("high", "medium", "low")
DEFAULT_PER_SAMPLE_SECONDS = {"high": 0.002, "medium": 0.004, "low": 0.008}
RATE_CLAMP = (0.01, 0.99)
ONLINE_RATE_RANGE = (0.2, 0.8)


@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    capability_class: str
    undependability_rate: float
    online_rate: float
    bandwidth_range: tuple[float, float] = (1.0, 30.0)
    data_ref: int = -1  # index of this device's shard; -1 means "same as device_id"

    def __post_init__(self):
        if self.capability_class not in CAPABILITY_CLASSES:
            raise ValueError(f"unknown capability class {self.capability_class!r}")
        if not 0.0 <= self.undependability_rate <= 1.0:
            raise ValueError("undependability_rate must lie in [0, 1]")
        if not 0.0 <= self.online_rate <= 1.0:
            raise ValueError("online_rate must lie in [0, 1]")
        lo, hi = self.bandwidth_range
        if not 0 < lo <= hi:
            raise ValueError("bandwidth_range must satisfy 0 < min <= max")

    @property
    def shard(self) -> int:
        return self.device_id if self.data_ref < 0 else self.data_ref


@dataclass
class VirtualClock:
    now: float = 0.0

    def advance(self, seconds: float) -> float:
        if seconds < 0 or math.isnan(seconds):
            raise ValueError(f"clock cannot move backwards (dt={seconds})")
        self.now += seconds
        return self.now


@dataclass(frozen=True)
class Interruption:
    """Outcome of one training session: ``fraction`` is None when it completes."""

    fraction: float | None = None

    @property
    def completes(self) -> bool:
        return self.fraction is None


@dataclass(frozen=True)
class EnvConfig:
    n_devices: int = 250
    group_means: tuple[float, ...] = (0.2, 0.4, 0.6)
    group_variance: float = 0.04
    online_interval_s: float = 600.0
    bandwidth_range: tuple[float, float] = (1.0, 30.0)
    per_sample_seconds: dict = field(default_factory=lambda: dict(DEFAULT_PER_SAMPLE_SECONDS))
    seed: int = 0

    FIELDS = (
        "n_devices",
        "group_means",
        "group_variance",
        "online_interval_s",
        "bandwidth_range",
        "per_sample_seconds",
        "seed",
    )

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        """Strict loader: every field is required and unknown keys are rejected."""
        missing = [k for k in cls.FIELDS if k not in data]
        unknown = sorted(set(data) - set(cls.FIELDS))
        if missing or unknown:
            raise ValueError(f"env config: missing={missing} unknown={unknown}")
        return cls(
            n_devices=int(data["n_devices"]),
            group_means=tuple(float(m) for m in data["group_means"]),
            group_variance=float(data["group_variance"]),
            online_interval_s=float(data["online_interval_s"]),
            bandwidth_range=tuple(float(b) for b in data["bandwidth_range"]),
            per_sample_seconds={k: float(v) for k, v in data["per_sample_seconds"].items()},
            seed=int(data["seed"]),
        )

    def to_dict(self) -> dict:
        return {
            "n_devices": self.n_devices,
            "group_means": list(self.group_means),
            "group_variance": self.group_variance,
            "online_interval_s": self.online_interval_s,
            "bandwidth_range": list(self.bandwidth_range),
            "per_sample_seconds": dict(self.per_sample_seconds),
            "seed": self.seed,
        }


def generate_population(
    n_devices: int,
    group_means,
    group_variance: float,
    seed: int,
    bandwidth_range=(1.0, 30.0),
) -> list[DeviceProfile]:
    """Build ``n_devices`` profiles split into equal-size undependability groups.

    Rates within a group are Normal(mean, variance) clamped to [0.01, 0.99].
    A group mean of exactly 0 denotes a dependable group whose rates are 0.
    Online rates are Uniform[0.2, 0.8]; capability classes go round-robin.
    """
    if n_devices < 1:
        raise ValueError("n_devices must be >= 1")
    if group_variance <= 0:
        raise ValueError("group_variance must be > 0")
    means = [float(m) for m in group_means]
    if not means or any(not 0.0 <= m < 1.0 for m in means):
        raise ValueError("group means must lie in [0, 1)")
    std = math.sqrt(group_variance)
    groups = np.array_split(np.arange(n_devices), len(means))
    root = RngStream(seed, ("population",))
    devices = []
    for mean, members in zip(means, groups):
        for i in members:
            gen = root.child(int(i)).generator()
            draw = gen.normal(mean, std)
            online = gen.uniform(*ONLINE_RATE_RANGE)
            rate = 0.0 if mean == 0.0 else min(max(draw, RATE_CLAMP[0]), RATE_CLAMP[1])
            devices.append(
                DeviceProfile(
                    device_id=int(i),
                    capability_class=CAPABILITY_CLASSES[int(i) % len(CAPABILITY_CLASSES)],
                    undependability_rate=float(rate),
                    online_rate=float(online),
                    bandwidth_range=(float(bandwidth_range[0]), float(bandwidth_range[1])),
                )
            )
    return devices


def online_tick(now: float, interval: float) -> int:
    if interval <= 0:
        raise ValueError("online interval must be > 0")
    return int(math.floor(now / interval))


def step_online_states(population, clock: VirtualClock, interval: float = 600.0, seed: int = 0) -> set[int]:
    """Device ids online at ``clock.now``; states are redrawn once per interval."""
    tick = online_tick(clock.now, interval)
    return {
        d.device_id
        for d in population
        if RngStream(seed, ("online", d.device_id)).uniform(tick) <= d.online_rate
    }


def sample_bandwidth(device: DeviceProfile, seed: int, counter: int) -> float:
    lo, hi = device.bandwidth_range
    if lo == hi:
        return lo
    u = RngStream(seed, ("bandwidth", device.device_id)).uniform(counter)
    return lo + (hi - lo) * u


def draw_interruption(device: DeviceProfile, seed: int, counter: int) -> Interruption:
    """Bernoulli(undependability_rate) interruption at a Uniform(0, 1) point of the session."""
    stream = RngStream(seed, ("interrupt", device.device_id))
    if not stream.uniform(2 * counter) < device.undependability_rate:
        return Interruption()
    f = stream.uniform(2 * counter + 1)
    return Interruption(f if f > 0.0 else 0.5)


def transfer_seconds(n_bytes: float, mbps: float) -> float:
    return n_bytes * 8.0 / (mbps * 1e6)


def compute_seconds(device: DeviceProfile, n_samples: int, per_sample_seconds: dict) -> float:
    return n_samples * per_sample_seconds[device.capability_class]


class Environment:
    """Population plus config; answers every stochastic question the engine asks."""

    def __init__(self, config: EnvConfig, population: list[DeviceProfile] | None = None):
        self.config = config
        if population is None:
            population = generate_population(
                config.n_devices,
                config.group_means,
                config.group_variance,
                config.seed,
                config.bandwidth_range,
            )
        self.population = population
        self.by_id = {d.device_id: d for d in population}
        if len(self.by_id) != len(population):
            raise ValueError("device ids must be unique")
        self._online_cache: tuple[int, frozenset] | None = None

    @property
    def seed(self) -> int:
        return self.config.seed

    def online(self, now: float) -> frozenset:
        tick = online_tick(now, self.config.online_interval_s)
        if self._online_cache is None or self._online_cache[0] != tick:
            ids = step_online_states(
                self.population, VirtualClock(now), self.config.online_interval_s, self.seed
            )
            self._online_cache = (tick, frozenset(ids))
        return self._online_cache[1]

    def bandwidth(self, device_id: int, counter: int) -> float:
        return sample_bandwidth(self.by_id[device_id], self.seed, counter)

    def interruption(self, device_id: int, counter: int) -> Interruption:
        return draw_interruption(self.by_id[device_id], self.seed, counter)

    def compute_seconds(self, device_id: int, n_samples: int) -> float:
        return compute_seconds(self.by_id[device_id], n_samples, self.config.per_sample_seconds)
