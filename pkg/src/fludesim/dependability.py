"""Beta-posterior dependability, participation threshold and selection priority."""

from __future__ import annotations

from dataclasses import dataclass, replace

DEFAULT_PRIOR = (2.0, 2.0)


@dataclass(frozen=True)
class DependabilityEstimate:
    alpha: float = DEFAULT_PRIOR[0]
    beta: float = DEFAULT_PRIOR[1]
    q: int = 0  # rounds this device has been selected

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Beta parameters must be positive")
        if self.q < 0:
            raise ValueError("participation count must be non-negative")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    def participated(self) -> "DependabilityEstimate":
        return replace(self, q=self.q + 1)


@dataclass(frozen=True)
class FrequencyState:
    population_size: int
    cumulative_selected: int = 0
    rounds: int = 0

    def record_round(self, n_selected: int) -> "FrequencyState":
        return replace(
            self,
            cumulative_selected=self.cumulative_selected + int(n_selected),
            rounds=self.rounds + 1,
        )


def update_dependability(est: DependabilityEstimate, s: int, f: int) -> DependabilityEstimate:
    """Fold ``s`` successes and ``f`` failures into the Beta posterior."""
    if s < 0 or f < 0:
        raise ValueError("success and failure counts must be non-negative")
    return replace(est, alpha=est.alpha + s, beta=est.beta + f)


def frequency_threshold(state: FrequencyState) -> float:
    """Average participation count if every round had sampled uniformly."""
    if state.population_size < 1:
        raise ValueError("population must contain at least one device")
    return state.cumulative_selected / state.population_size


def priority(est: DependabilityEstimate, Q: float, sigma: float) -> float:
    # strict Q < q: a device exactly at the average is not penalised
    r = est.mean
    if sigma == 0 or not Q < est.q:
        return r
    return r * (Q / est.q) ** sigma


class BetaEstimator:
    """Per-device estimates behind one object so another family could replace it."""

    def __init__(self, n_devices: int, prior=DEFAULT_PRIOR):
        self.prior = (float(prior[0]), float(prior[1]))
        self.estimates = [DependabilityEstimate(*self.prior) for _ in range(n_devices)]

    def __getitem__(self, device_id: int) -> DependabilityEstimate:
        return self.estimates[device_id]

    def __len__(self) -> int:
        return len(self.estimates)

    def mean(self, device_id: int) -> float:
        return self.estimates[device_id].mean

    def observe(self, device_id: int, success: bool) -> None:
        self.estimates[device_id] = update_dependability(
            self.estimates[device_id], int(success), int(not success)
        )

    def mark_selected(self, device_ids) -> None:
        for i in device_ids:
            self.estimates[i] = self.estimates[i].participated()

    def to_json(self) -> list:
        return [[e.alpha, e.beta, e.q] for e in self.estimates]

    @classmethod
    def from_json(cls, rows, prior=DEFAULT_PRIOR) -> "BetaEstimator":
        est = cls(0, prior)
        est.estimates = [DependabilityEstimate(float(a), float(b), int(q)) for a, b, q in rows]
        return est
