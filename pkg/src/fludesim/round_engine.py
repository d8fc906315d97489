"""Round coordinator: budget-sized selection, staleness-aware distribution,
simulated local sessions with interruptions, quorum/deadline close and
sample-weighted aggregation.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from fludesim.cache import CacheEntry, ModelCache, caching_interval, default_tick, resume_or_fresh
from fludesim.checkpoint import read_checkpoint, write_checkpoint
from fludesim.dependability import BetaEstimator, FrequencyState
from fludesim.distributor import (
    DistributionState,
    ParticipantGroups,
    adapt_threshold,
    distribution_set,
    partition_groups,
)
from fludesim.env_sim import Environment, VirtualClock, transfer_seconds
from fludesim.rng import RngStream
from fludesim.scenario import Scenario, scenario_from_dict
from fludesim.selector import Selection, decay_epsilon, select_participants, select_uniform
from fludesim.trainer import (
    ModelParams,
    ModelSpec,
    evaluate,
    generate_synthetic_task,
    pass_order,
    train_local,
)

log = logging.getLogger(__name__)

MAX_SIZING_ITERATIONS = 20

ROUND_LOG_COLUMNS = (
    "round",
    "n_online",
    "n_selected",
    "n_distributed",
    "n_resumed",
    "n_uploaded",
    "n_interrupted",
    "duration_s",
    "W",
    "epsilon",
    "cum_download",
    "cum_upload",
    "train_loss",
    "test_acc",
)
SELECTION_COLUMNS = ("round", "device_id", "selected_via", "priority")
DISTRIBUTION_COLUMNS = ("round", "W", "avg_staleness_H", "n_distributed", "n_resumed")
LOG_FILES = {
    "round_log.csv": ROUND_LOG_COLUMNS,
    "selection_trace.csv": SELECTION_COLUMNS,
    "distribution_log.csv": DISTRIBUTION_COLUMNS,
}


class InfeasibleBudget(RuntimeError):
    pass


class RoundError(RuntimeError):
    def __init__(self, round_k: int, cause: Exception):
        super().__init__(f"round {round_k}: {cause}")
        self.round_k = round_k


@dataclass
class RoundPlan:
    round_k: int
    online: frozenset
    selection: Selection
    groups: ParticipantGroups
    distributed: frozenset
    stalenesses: dict[int, int]
    avg_dependability: float
    predicted_cost: float
    deadline: float
    dist_state: DistributionState
    iterations: int = 1

    @property
    def selected(self) -> list[int]:
        return self.selection.selected

    @property
    def quorum(self) -> int:
        return upload_quorum(len(self.selected), self.avg_dependability)


@dataclass
class Upload:
    device_id: int
    n_samples: int
    arrival: float
    params: np.ndarray | None = None


@dataclass
class RoundReport:
    round_k: int
    received: list[Upload]
    duration: float
    download_count: int
    upload_count: int
    interrupted: set[int] = field(default_factory=set)
    late: set[int] = field(default_factory=set)
    missed_deadline: set[int] = field(default_factory=set)
    resumed: set[int] = field(default_factory=set)
    closed_by: str = "deadline"

    def strip(self) -> "RoundReport":
        """Same report without the uploaded parameter vectors."""
        light = [Upload(u.device_id, u.n_samples, u.arrival) for u in self.received]
        return RoundReport(
            self.round_k, light, self.duration, self.download_count, self.upload_count,
            set(self.interrupted), set(self.late), set(self.missed_deadline), set(self.resumed), self.closed_by,
        )


@dataclass
class GlobalModel:
    params: ModelParams
    version: int = 0


def upload_quorum(n_selected: int, avg_dependability: float) -> int:
    return int(math.ceil(n_selected * avg_dependability - 1e-9))


def predicted_cost(n_distributed: int, n_selected: int, avg_dependability: float) -> float:
    return n_distributed + n_selected * avg_dependability


def size_participants(budget: float, max_x: int, plan_for: Callable[[int, int], RoundPlan]) -> RoundPlan:
    """Shrink the participant count until the predicted transfers fit the budget.

    ``plan_for(x, iteration)`` reselects and returns a candidate plan. The
    first candidate uses every available device; each later one scales
    ``x`` by ``budget / B_pred`` (floored). After MAX_SIZING_ITERATIONS the
    count drops straight to one.
    """
    if budget < 2:
        raise InfeasibleBudget(f"budget {budget} cannot cover one download and one upload")
    x = max(1, max_x)
    plan = plan_for(x, 0)
    iteration = 1
    while plan.predicted_cost > budget and x > 1:
        if iteration >= MAX_SIZING_ITERATIONS:
            x = 1
        else:
            x = max(1, int(math.floor(x * budget / plan.predicted_cost)))
        plan = plan_for(x, iteration)
        iteration += 1
    plan.iterations = iteration
    if plan.predicted_cost > budget:
        raise InfeasibleBudget(f"predicted cost {plan.predicted_cost:.3f} exceeds budget {budget} at X=1")
    return plan


def close_round(arrivals: list[tuple[float, int]], n_selected: int, avg_dependability: float, deadline: float,
                quorum: int | None = None) -> tuple[list[tuple[float, int]], float, str]:
    """Accept uploads in (time, id) order until the quorum or the deadline.

    Returns the accepted arrivals, the round duration and which condition
    closed the round.
    """
    if quorum is None:
        quorum = upload_quorum(n_selected, avg_dependability)
    on_time = [a for a in sorted(arrivals) if a[0] <= deadline]
    if n_selected and quorum and len(on_time) >= quorum:
        accepted = on_time[:quorum]
        return accepted, accepted[-1][0], "quorum"
    return on_time, float(deadline), "deadline"


def aggregate(uploads: list[Upload], global_model: GlobalModel) -> GlobalModel:
    """Sample-count weighted average; an empty round carries the model forward."""
    spec = global_model.params.spec
    if not uploads:
        return GlobalModel(global_model.params.copy(), global_model.version + 1)
    total = float(sum(u.n_samples for u in uploads))
    acc = np.zeros(spec.size, dtype=np.float64)
    for u in sorted(uploads, key=lambda u: u.device_id):
        if u.params is None or u.params.shape != (spec.size,):
            raise ValueError(f"upload from device {u.device_id} does not match the global model shape")
        acc += (u.n_samples / total) * u.params.astype(np.float64)
    return GlobalModel(ModelParams(acc.astype(np.float32), spec), global_model.version + 1)


@dataclass
class RunResult:
    rows: list[dict]
    reports: list[RoundReport]
    global_model: GlobalModel
    participation: np.ndarray
    per_class_accuracy: np.ndarray
    completed_rounds: int


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Simulation:
    """All mutable run state, advanced one round at a time by ``step``."""

    def __init__(self, scenario: Scenario, out_dir=None, fresh_logs: bool = True):
        self.scenario = scenario
        self.variant = scenario.variant
        self.env = Environment(scenario.env)
        t = scenario.task
        self.task = generate_synthetic_task(
            t.n_classes, t.dim, scenario.env.n_devices, t.samples_per_device, t.classes_per_device,
            scenario.seed, t.mean_separation, t.test_per_class,
        )
        self.spec = ModelSpec(t.dim, t.n_classes, scenario.trainer.hidden)
        self._train_x, self._train_y = self.task.pooled()
        fl = scenario.flude
        n = scenario.env.n_devices
        self.estimator = BetaEstimator(n, (fl.prior_alpha, fl.prior_beta))
        self.freq = FrequencyState(n)
        self.explored: set[int] = set()
        self.epsilon = fl.epsilon0
        self.dist_state = DistributionState(w=fl.w0, lam=fl.lam, mu=fl.mu, w_min=fl.w_min, w_max=fl.w_max)
        self.cache = ModelCache()
        self.global_model = GlobalModel(self.spec.init(scenario.seed), 0)
        self.clock = VirtualClock(0.0)
        self.round = 0
        self.cum_download = 0
        self.cum_upload = 0
        self.rows: list[dict] = []
        self.reports: list[RoundReport] = []
        self.last_eval = None
        self.payload_bytes = fl.payload_mb * 1e6 if fl.payload_mb is not None else float(self.spec.nbytes)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None and fresh_logs:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            for name, columns in LOG_FILES.items():
                with open(self.out_dir / name, "w", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerow(columns)

    # -- variant switches --------------------------------------------------
    @property
    def uses_selector(self) -> bool:
        return self.variant in ("flude", "full_distribution", "least_distribution")

    @property
    def uses_cache(self) -> bool:
        return self.variant != "fedavg"

    # -- planning ----------------------------------------------------------
    def _plan_for(self, online: frozenset, round_k: int) -> Callable[[int, int], RoundPlan]:
        fl = self.scenario.flude

        def plan(x: int, iteration: int) -> RoundPlan:
            rng = RngStream(self.scenario.seed, ("select", round_k)).generator(iteration)
            if self.uses_selector:
                sel = select_participants(
                    online, self.explored, self.estimator, self.freq, x, self.epsilon, fl.sigma, rng
                )
            else:
                sel = select_uniform(online, x, rng)
            status = self.cache.status(sel.selected, round_k) if self.uses_cache else {}
            groups = partition_groups(sel.selected, status)
            stale = {i: status[i] for i in groups.v}
            state = self.dist_state
            if self.variant in ("full_distribution", "fedavg"):
                distributed = groups.selected
            elif self.variant == "least_distribution":
                distributed = groups.u
            else:
                state = adapt_threshold(self.dist_state, stale)
                distributed = distribution_set(groups, stale, state.w)
            r = float(np.mean([self.estimator.mean(i) for i in sel.selected])) if sel.selected else 0.0
            return RoundPlan(
                round_k=round_k,
                online=online,
                selection=sel,
                groups=groups,
                distributed=frozenset(distributed),
                stalenesses=stale,
                avg_dependability=r,
                predicted_cost=predicted_cost(len(distributed), len(sel.selected), r),
                deadline=fl.deadline_s,
                dist_state=state,
            )

        return plan

    def plan_round(self) -> RoundPlan:
        round_k = self.round + 1
        online = self.env.online(self.clock.now)
        max_x = min(len(online), self.scenario.flude.max_participants)
        plan_for = self._plan_for(online, round_k)
        if max_x == 0:
            return plan_for(1, 0)  # nobody online: an empty plan
        if self.variant == "fedavg":
            return plan_for(max_x, 0)
        return size_participants(self.scenario.flude.budget, max_x, plan_for)

    # -- local sessions ----------------------------------------------------
    def _tick(self, device_id: int, total: int) -> int:
        fl = self.scenario.flude
        if fl.cache_policy == "fixed":
            return default_tick(total, fl.ticks_per_pass)
        dev = self.env.by_id[device_id]
        seconds = caching_interval(1.0 - dev.undependability_rate, dev.online_rate, fl.base_cache_interval_s)
        per_sample = self.scenario.env.per_sample_seconds[dev.capability_class]
        return max(1, math.ceil(seconds / per_sample))

    def run_local_sessions(self, plan: RoundPlan) -> RoundReport:
        k = plan.round_k
        trainer_cfg = self.scenario.trainer
        global_values = self.global_model.params.values
        arrivals, finished, interrupted, resumed = [], {}, set(), set()
        for i in plan.selected:
            fresh = (i in plan.distributed) or not self.uses_cache
            start = resume_or_fresh(self.cache, i, k, fresh, global_values)
            if not fresh:
                resumed.add(i)
            elapsed = 0.0
            if fresh:
                elapsed += transfer_seconds(self.payload_bytes, self.env.bandwidth(i, 2 * k))
            dev = self.env.by_id[i]
            shard = self.task.shards[dev.shard]
            total = trainer_cfg.pass_length(len(shard))
            order = pass_order(self.scenario.seed, i, start.pass_round, len(shard), total)
            outcome = self.env.interruption(i, k)
            hook = None
            if self.uses_cache:
                t0 = self.clock.now + elapsed

                def hook(position, params, i=i, offset=start.offset, pass_round=start.pass_round, t0=t0, total=total):
                    self.cache.checkpoint(i, CacheEntry(
                        params=params,
                        processed_samples=position,
                        total_samples=total,
                        learning_rate=trainer_cfg.learning_rate,
                        cached_round=k,
                        cached_clock=t0 + self.env.compute_seconds(i, position - offset),
                        pass_round=pass_round,
                    ))

            result = train_local(
                self.spec, start.params, shard, trainer_cfg, order,
                resume_offset=start.offset,
                interruption_fraction=outcome.fraction,
                tick=self._tick(i, total),
                checkpoint_hook=hook,
            )
            elapsed += self.env.compute_seconds(i, result.samples_processed)
            if not result.completed:
                interrupted.add(i)
                continue
            self.cache.clear(i)
            elapsed += transfer_seconds(self.payload_bytes, self.env.bandwidth(i, 2 * k + 1))
            arrivals.append((elapsed, i))
            finished[i] = Upload(i, len(shard), elapsed, result.params)

        quorum = len(plan.selected) if self.variant == "fedavg" else plan.quorum
        accepted, duration, closed_by = close_round(
            arrivals, len(plan.selected), plan.avg_dependability, plan.deadline, quorum
        )
        accepted_ids = {i for _, i in accepted}
        late = {i for t, i in arrivals if i not in accepted_ids and t <= plan.deadline}
        missed = {i for t, i in arrivals if t > plan.deadline}
        received = [finished[i] for _, i in accepted]
        return RoundReport(
            round_k=k,
            received=received,
            duration=duration,
            download_count=len(plan.distributed),
            upload_count=len(received),
            interrupted=interrupted,
            late=late,
            missed_deadline=missed,
            resumed=resumed,
            closed_by=closed_by,
        )

    # -- one round ---------------------------------------------------------
    def step(self) -> RoundReport:
        round_k = self.round + 1
        try:
            plan = self.plan_round()
            self._commit_plan(plan)
            report = self.run_local_sessions(plan)
            self._observe(plan, report)
            self.global_model = aggregate(report.received, self.global_model)
        except Exception as exc:  # noqa: BLE001 - re-raised with round context
            raise RoundError(round_k, exc) from exc
        if self.uses_selector:
            fl = self.scenario.flude
            self.epsilon = decay_epsilon(self.epsilon, fl.epsilon_decay, fl.epsilon_floor)
        self.clock.advance(report.duration)
        self.round = round_k
        self.cum_download += report.download_count
        self.cum_upload += report.upload_count
        self.reports.append(report.strip())
        row = self._round_row(plan, report)
        self.rows.append(row)
        if self.out_dir is not None:
            self._append_logs(plan, row)
        return report

    def _commit_plan(self, plan: RoundPlan) -> None:
        self.estimator.mark_selected(plan.selected)
        self.freq = self.freq.record_round(len(plan.selected))
        self.explored.update(plan.selection.explored)
        self.dist_state = plan.dist_state

    def _observe(self, plan: RoundPlan, report: RoundReport) -> None:
        # success = the upload reached the server by the deadline, even if the
        # quorum had already closed the round
        received = {u.device_id for u in report.received}
        for i in plan.selected:
            self.estimator.observe(i, i in received or i in report.late)

    def _round_row(self, plan: RoundPlan, report: RoundReport) -> dict:
        ev = evaluate(self.spec, self.global_model.params.values, self.task.test_features, self.task.test_labels)
        train_loss = evaluate(self.spec, self.global_model.params.values, self._train_x, self._train_y).loss
        self.last_eval = ev
        n_resumed = len(plan.selected) - len(plan.distributed)
        stale = plan.stalenesses
        return {
            "round": plan.round_k,
            "n_online": len(plan.online),
            "n_selected": len(plan.selected),
            "n_distributed": len(plan.distributed),
            "n_resumed": n_resumed,
            "n_uploaded": report.upload_count,
            "n_interrupted": len(report.interrupted),
            "duration_s": float(report.duration),
            "W": float(plan.dist_state.w),
            "epsilon": float(self.epsilon),
            "cum_download": self.cum_download,
            "cum_upload": self.cum_upload,
            "train_loss": float(train_loss),
            "test_acc": float(ev.accuracy),
            # not written to round_log.csv
            "avg_staleness_H": float(sum(stale.values()) / len(stale)) if stale else 0.0,
            "B_pred": float(plan.predicted_cost),
            "R": float(plan.avg_dependability),
            "clock_s": float(self.clock.now),
        }

    def _append_logs(self, plan: RoundPlan, row: dict) -> None:
        with open(self.out_dir / "round_log.csv", "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row[c]) for c in ROUND_LOG_COLUMNS])
        with open(self.out_dir / "selection_trace.csv", "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            sel = plan.selection
            for i in plan.selected:
                prio = sel.priorities.get(i)
                w.writerow([plan.round_k, i, sel.via(i), "" if prio is None else _fmt(float(prio))])
        with open(self.out_dir / "distribution_log.csv", "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [plan.round_k, _fmt(row["W"]), _fmt(row["avg_staleness_H"]), row["n_distributed"], row["n_resumed"]]
            )

    # -- driving -----------------------------------------------------------
    def run(self, total_rounds: int | None = None, stop_after: int | None = None,
            checkpoint_path=None) -> RunResult:
        """Advance until ``total_rounds`` rounds exist, or stop early after
        ``stop_after`` rounds in this call. Checkpoints after every round when a
        path (or an output directory) is available."""
        total_rounds = self.scenario.rounds if total_rounds is None else total_rounds
        if checkpoint_path is None and self.out_dir is not None:
            checkpoint_path = self.out_dir / "checkpoint.bin"
        done = 0
        while self.round < total_rounds and (stop_after is None or done < stop_after):
            self.step()
            done += 1
            if checkpoint_path is not None:
                self.save_checkpoint(checkpoint_path, total_rounds)
        return self.result()

    def result(self) -> RunResult:
        per_class = self.last_eval.per_class_accuracy if self.last_eval is not None else evaluate(
            self.spec, self.global_model.params.values, self.task.test_features, self.task.test_labels
        ).per_class_accuracy
        return RunResult(
            rows=list(self.rows),
            reports=list(self.reports),
            global_model=self.global_model,
            participation=np.array([e.q for e in self.estimator.estimates]),
            per_class_accuracy=per_class,
            completed_rounds=self.round,
        )

    # -- checkpointing -----------------------------------------------------
    def save_checkpoint(self, path, total_rounds: int) -> None:
        arrays = {"global": self.global_model.params.values}
        cache_meta = []
        for i, entry in self.cache.items():
            arrays[f"cache/{i:06d}"] = entry.params
            cache_meta.append([i, entry.processed_samples, entry.total_samples, entry.learning_rate,
                               entry.cached_round, entry.cached_clock, entry.pass_round])
        ds = self.dist_state
        log_sizes = {}
        if self.out_dir is not None:
            log_sizes = {name: (self.out_dir / name).stat().st_size for name in LOG_FILES}
        state = {
            "scenario": self.scenario.to_dict(),
            "total_rounds": total_rounds,
            "round": self.round,
            "clock": self.clock.now,
            "epsilon": self.epsilon,
            "version": self.global_model.version,
            "estimates": self.estimator.to_json(),
            "freq": [self.freq.cumulative_selected, self.freq.rounds],
            "explored": sorted(self.explored),
            "dist_state": [ds.w, ds.h_old, ds.n_old],
            "cache": cache_meta,
            "cum": [self.cum_download, self.cum_upload],
            "rows": self.rows,
            "reports": [
                [r.round_k, [[u.device_id, u.n_samples, u.arrival] for u in r.received], r.duration,
                 r.download_count, r.upload_count, sorted(r.interrupted), sorted(r.late),
                 sorted(r.missed_deadline), sorted(r.resumed), r.closed_by]
                for r in self.reports
            ],
            "out_dir": str(self.out_dir) if self.out_dir is not None else None,
            "log_sizes": log_sizes,
        }
        write_checkpoint(path, state, arrays)

    @classmethod
    def from_checkpoint(cls, path, out_dir=None) -> tuple["Simulation", int]:
        state, arrays = read_checkpoint(path)
        scenario = scenario_from_dict(state["scenario"])
        out = out_dir if out_dir is not None else state["out_dir"]
        sim = cls(scenario, out_dir=out, fresh_logs=False)
        if sim.out_dir is not None:
            sizes = state["log_sizes"] if out_dir is None or str(out_dir) == state["out_dir"] else {}
            for name, columns in LOG_FILES.items():
                target = sim.out_dir / name
                if name in sizes and target.exists():
                    with open(target, "r+b") as fh:
                        fh.truncate(sizes[name])
                else:
                    raise FileNotFoundError(f"cannot resume logs: {target} missing or not from this checkpoint")
        sim.round = state["round"]
        sim.clock = VirtualClock(state["clock"])
        sim.epsilon = state["epsilon"]
        sim.global_model = GlobalModel(ModelParams(arrays["global"], sim.spec), state["version"])
        sim.estimator = BetaEstimator.from_json(state["estimates"], sim.estimator.prior)
        sim.freq = FrequencyState(scenario.env.n_devices, state["freq"][0], state["freq"][1])
        sim.explored = set(state["explored"])
        w, h_old, n_old = state["dist_state"]
        sim.dist_state = DistributionState(w=w, h_old=h_old, n_old=n_old, lam=scenario.flude.lam,
                                           mu=scenario.flude.mu, w_min=scenario.flude.w_min,
                                           w_max=scenario.flude.w_max)
        for i, processed, total, lr, cached_round, cached_clock, pass_round in state["cache"]:
            sim.cache.checkpoint(i, CacheEntry(arrays[f"cache/{i:06d}"], processed, total, lr,
                                               cached_round, cached_clock, pass_round))
        sim.cum_download, sim.cum_upload = state["cum"]
        sim.rows = state["rows"]
        sim.reports = [
            RoundReport(k, [Upload(d, n, t) for d, n, t in rec], dur, dc, uc, set(intr), set(late),
                        set(missed), set(res), closed)
            for k, rec, dur, dc, uc, intr, late, missed, res, closed in state["reports"]
        ]
        if sim.round:
            sim.last_eval = evaluate(sim.spec, sim.global_model.params.values,
                                     sim.task.test_features, sim.task.test_labels)
        return sim, state["total_rounds"]


def run_training(scenario: Scenario, total_rounds: int | None = None, out_dir=None) -> RunResult:
    """Run a scenario from scratch for ``total_rounds`` (default: scenario.rounds)."""
    sim = Simulation(scenario, out_dir=out_dir)
    result = sim.run(total_rounds)
    if sim.out_dir is not None:
        from fludesim.metrics import write_run_outputs

        write_run_outputs(sim.out_dir, scenario, result)
    return result
