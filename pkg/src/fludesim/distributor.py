"""Staleness-aware choice of which selected devices get the fresh global model."""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class DistributionState:
    w: float = 5.0
    h_old: float = 0.0
    n_old: int = 0
    lam: float = 1.0
    mu: float = 0.5
    w_min: float = 1.0
    w_max: float = 50.0

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lambda and mu must be non-negative")
        if self.w_min > self.w_max:
            raise ValueError("w_min must not exceed w_max")


@dataclass(frozen=True)
class ParticipantGroups:
    u: frozenset  # never selected, or completed last time: no usable cache
    v: frozenset  # interrupted last time and holding a cache

    @property
    def selected(self) -> frozenset:
        return self.u | self.v


def partition_groups(selected, cache_status) -> ParticipantGroups:
    """``cache_status`` maps device id to staleness (or None/absent when uncached)."""
    v = frozenset(i for i in selected if cache_status.get(i) is not None)
    return ParticipantGroups(u=frozenset(selected) - v, v=v)


def threshold_factors(w_old, h_old, h_new, n_old, n_new, lam, mu) -> tuple[float, float]:
    """Unclamped staleness step then cost step; a zero baseline skips its factor."""
    w_prime = w_old if h_old == 0 else w_old * (1 - lam * (h_new - h_old) / h_old)
    w_new = w_prime if n_old == 0 else w_prime * (1 + mu * (n_new - n_old) / n_old)
    return w_prime, w_new


def staleness_step(state: DistributionState, h_new: float) -> float:
    return threshold_factors(state.w, state.h_old, h_new, 1, 1, state.lam, 0.0)[0]


def update_threshold(state: DistributionState, h_new: float, n_new: int) -> DistributionState:
    _, w_new = threshold_factors(state.w, state.h_old, h_new, state.n_old, n_new, state.lam, state.mu)
    w_new = min(max(w_new, state.w_min), state.w_max)
    return replace(state, w=w_new, h_old=float(h_new), n_old=int(n_new))


def adapt_threshold(state: DistributionState, stalenesses: dict[int, int]) -> DistributionState:
    """One round of threshold adaptation from the V group's stalenesses.

    The cost count is taken by applying the intermediate threshold to the
    current V group. With an empty V there is nothing to measure and the state
    is returned unchanged.
    """
    if not stalenesses:
        return state
    h_new = sum(stalenesses.values()) / len(stalenesses)
    w_prime = staleness_step(state, h_new)
    n_new = sum(1 for s in stalenesses.values() if s > w_prime)
    return update_threshold(state, h_new, n_new)


def distribution_set(groups: ParticipantGroups, stalenesses: dict[int, int], w: float) -> frozenset:
    """Everyone in U plus the V devices whose cache is strictly staler than ``w``."""
    return groups.u | frozenset(i for i in groups.v if stalenesses[i] > w)
