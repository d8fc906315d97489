"""Run summaries, participation-balance statistics and variant comparisons."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fludesim.scenario import ABLATION_VARIANTS, VARIANTS, Scenario

SUMMARY_COLUMNS = (
    "variant",
    "seed",
    "rounds",
    "final_accuracy",
    "time_to_accuracy_s",
    "comm_to_accuracy",
    "total_comm_units",
    "total_downloads",
    "total_uploads",
    "participation_gini",
    "target_accuracy",
)


@dataclass
class RunSummary:
    final_accuracy: float
    time_to_accuracy: float | None  # None: the target was never reached
    comm_to_accuracy: int | None
    total_comm_units: int
    total_downloads: int
    total_uploads: int
    rounds: int
    per_device_participation: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    per_class_accuracy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    variant: str = ""
    seed: int = 0
    target_accuracy: float = 0.0

    @property
    def participation_gini(self) -> float:
        return gini(self.per_device_participation)

    def row(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "rounds": self.rounds,
            "final_accuracy": self.final_accuracy,
            "time_to_accuracy_s": "" if self.time_to_accuracy is None else self.time_to_accuracy,
            "comm_to_accuracy": "" if self.comm_to_accuracy is None else self.comm_to_accuracy,
            "total_comm_units": self.total_comm_units,
            "total_downloads": self.total_downloads,
            "total_uploads": self.total_uploads,
            "participation_gini": self.participation_gini if len(self.per_device_participation) else "",
            "target_accuracy": self.target_accuracy,
        }


def gini(values) -> float:
    """Gini coefficient of non-negative counts (0 = perfectly even)."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = len(x)
    if n == 0 or x.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float((2 * np.sum(ranks * x)) / (n * x.sum()) - (n + 1) / n)


def coefficient_of_variation(values) -> float:
    x = np.asarray(values, dtype=np.float64)
    return float(x.std() / x.mean()) if x.mean() > 0 else 0.0


def compute_summary(rows: list[dict], target_accuracy: float, participation=None, per_class=None,
                    final_window: int = 10) -> RunSummary:
    """Summarise a round log.

    Final accuracy is the mean test accuracy over the last ``final_window``
    rounds. Time and communication to accuracy are read at the end of the
    first round whose test accuracy reaches the target.
    """
    if not rows:
        raise ValueError("cannot summarise an empty round log")
    clock, tta, cta = 0.0, None, None
    for r in rows:
        clock += float(r["duration_s"])
        if tta is None and float(r["test_acc"]) >= target_accuracy:
            tta = clock
            cta = int(r["cum_download"]) + int(r["cum_upload"])
    tail = rows[-final_window:]
    last = rows[-1]
    downloads, uploads = int(last["cum_download"]), int(last["cum_upload"])
    return RunSummary(
        final_accuracy=float(np.mean([float(r["test_acc"]) for r in tail])),
        time_to_accuracy=tta,
        comm_to_accuracy=cta,
        total_comm_units=downloads + uploads,
        total_downloads=downloads,
        total_uploads=uploads,
        rounds=len(rows),
        per_device_participation=np.asarray(participation if participation is not None else [], dtype=int),
        per_class_accuracy=np.asarray(per_class if per_class is not None else []),
        target_accuracy=target_accuracy,
    )


def summarize_result(scenario: Scenario, result, target_accuracy: float | None = None) -> RunSummary:
    target = scenario.target_accuracy if target_accuracy is None else target_accuracy
    s = compute_summary(result.rows, target, result.participation, result.per_class_accuracy,
                        scenario.final_window)
    s.variant, s.seed = scenario.variant, scenario.seed
    return s


def run_baseline(variant: str, scenario: Scenario, total_rounds: int | None = None):
    """Run one variant of ``scenario`` in memory; returns (RunSummary, RunResult)."""
    from fludesim.round_engine import run_training

    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    sc = scenario.with_variant(variant)
    result = run_training(sc, total_rounds)
    return summarize_result(sc, result), result


def _run_one(args):
    variant, scenario, total_rounds = args
    summary, result = run_baseline(variant, scenario, total_rounds)
    return summary, result.rows


def worker_count() -> int:
    cap = os.environ.get("FLUDE_SIM_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def run_matrix(scenario: Scenario, seeds, variants=ABLATION_VARIANTS, total_rounds=None,
               workers: int | None = None) -> list[tuple[RunSummary, list[dict]]]:
    """Every (variant, seed) pair, paired by seed; results come back in job order."""
    jobs = [(v, scenario.with_seed(s), total_rounds) for s in seeds for v in variants]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_one, jobs))


def write_summary_csv(path, summaries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for s in summaries:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in s.row().items()})


def write_curve(path, rows) -> None:
    """Whitespace-separated ``round accuracy cum_comm`` for gnuplot."""
    with open(path, "w") as fh:
        fh.write("# round test_acc cum_comm\n")
        for r in rows:
            fh.write(f"{r['round']} {float(r['test_acc'])!r} {int(r['cum_download']) + int(r['cum_upload'])}\n")


def write_run_outputs(out_dir, scenario: Scenario, result) -> RunSummary:
    out_dir = Path(out_dir)
    summary = summarize_result(scenario, result)
    write_summary_csv(out_dir / "summary.csv", [summary])
    write_curve(out_dir / "curve.dat", result.rows)
    return summary


def comparison_table(summaries) -> list[dict]:
    """Per-variant means across seeds."""
    by_variant: dict[str, list[RunSummary]] = {}
    for s in summaries:
        by_variant.setdefault(s.variant, []).append(s)
    table = []
    for variant, group in by_variant.items():
        tta = [s.time_to_accuracy for s in group if s.time_to_accuracy is not None]
        table.append({
            "variant": variant,
            "n_seeds": len(group),
            "mean_final_accuracy": float(np.mean([s.final_accuracy for s in group])),
            "mean_total_comm_units": float(np.mean([s.total_comm_units for s in group])),
            "mean_time_to_accuracy_s": float(np.mean(tta)) if tta else math.nan,
            "reached_target": len(tta),
            "mean_participation_gini": float(np.mean([s.participation_gini for s in group])),
        })
    return table


def write_comparison_csv(path, table) -> None:
    if not table:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def sign_test_p(successes: int, trials: int) -> float:
    """One-sided sign-test p-value: P(X >= successes) for X ~ Binomial(trials, 1/2)."""
    return sum(math.comb(trials, k) for k in range(successes, trials + 1)) / 2**trials
