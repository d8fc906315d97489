"""Exploit/explore participant selection over online devices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fludesim.dependability import FrequencyState, frequency_threshold, priority

EPSILON_DECAY = 0.98
EPSILON_FLOOR = 0.2


@dataclass
class Selection:
    selected: list[int]
    exploited: list[int]
    explored: list[int]
    priorities: dict[int, float] = field(default_factory=dict)
    Q: float = 0.0
    shortfall: bool = False  # fewer than X devices could be found

    def via(self, device_id: int) -> str:
        return "explore" if device_id in self.explored else "exploit"


def exploit_count(x: int, epsilon: float) -> int:
    # tolerance keeps e.g. (1 - 1/3) * 3 from flooring to 1
    return int(math.floor((1.0 - epsilon) * x + 1e-9))


def rank_by_priority(priorities: dict[int, float]) -> list[int]:
    """Highest priority first; equal priorities fall back to ascending id."""
    return sorted(priorities, key=lambda i: (-priorities[i], i))


def select_participants(
    online,
    explored,
    estimates,
    freq: FrequencyState,
    x: int,
    epsilon: float,
    sigma: float,
    rng: np.random.Generator,
) -> Selection:
    """Pick up to ``x`` online devices: top priorities among explored ones plus
    a uniform sample of never-selected ones.

    ``estimates`` is indexable by device id. Neither ``explored`` nor the
    estimates are modified; callers commit ``Selection.explored`` themselves.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if x < 1:
        raise ValueError("participant count must be >= 1")
    online = set(online)
    Q = frequency_threshold(freq)
    known = sorted(online & set(explored))
    fresh = sorted(online - set(explored))
    priorities = {i: priority(estimates[i], Q, sigma) for i in known}

    n_exploit = exploit_count(x, epsilon)
    n_explore = x - n_exploit
    if len(fresh) < n_explore:
        n_exploit += n_explore - len(fresh)
        n_explore = len(fresh)
    if len(known) < n_exploit:
        n_explore = min(len(fresh), n_explore + n_exploit - len(known))
        n_exploit = len(known)

    exploited = rank_by_priority(priorities)[:n_exploit]
    explored_now = []
    if n_explore:
        explored_now = sorted(int(i) for i in rng.choice(fresh, size=n_explore, replace=False))
    selected = sorted(exploited + explored_now)
    return Selection(
        selected=selected,
        exploited=exploited,
        explored=explored_now,
        priorities=priorities,
        Q=Q,
        shortfall=len(selected) < x,
    )


def select_uniform(online, x: int, rng: np.random.Generator) -> Selection:
    """Selector-free baseline: ``x`` online devices uniformly at random."""
    pool = sorted(online)
    n = min(x, len(pool))
    chosen = sorted(int(i) for i in rng.choice(pool, size=n, replace=False)) if n else []
    return Selection(selected=chosen, exploited=[], explored=chosen, shortfall=n < x)


def decay_epsilon(epsilon: float, decay: float = EPSILON_DECAY, floor: float = EPSILON_FLOOR) -> float:
    if epsilon > floor:
        return max(floor, epsilon * decay)
    return epsilon
