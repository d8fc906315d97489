"""Scenario files: strict JSON with every omitted field defaulted."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from fludesim.env_sim import CAPABILITY_CLASSES, EnvConfig
from fludesim.trainer import TrainerConfig

VARIANTS = ("flude", "random_selection", "full_distribution", "least_distribution", "fedavg")
ABLATION_VARIANTS = ("flude", "random_selection", "full_distribution", "least_distribution")
CACHE_POLICIES = ("fixed", "adaptive")


class ScenarioError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class TaskConfig:
    n_classes: int = 10
    dim: int = 20
    samples_per_device: int = 320
    classes_per_device: int = 4
    mean_separation: float = 3.0
    test_per_class: int = 200


@dataclass(frozen=True)
class FludeConfig:
    budget: float = 100.0  # B_max, in whole-model transfers per round
    deadline_s: float = 180.0  # T
    max_participants: int = 50
    sigma: float = 0.5
    lam: float = 1.0
    mu: float = 0.5
    epsilon0: float = 0.9
    epsilon_decay: float = 0.98
    epsilon_floor: float = 0.2
    w0: float = 5.0
    w_min: float = 1.0
    w_max: float = 50.0
    prior_alpha: float = 2.0
    prior_beta: float = 2.0
    payload_mb: float | None = 10.0  # simulated wire size; None uses the real parameter bytes
    ticks_per_pass: int = 10
    cache_policy: str = "fixed"
    base_cache_interval_s: float = 60.0


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    rounds: int = 300
    variant: str = "flude"
    target_accuracy: float = 0.8
    final_window: int = 10
    env: EnvConfig = field(default_factory=EnvConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    flude: FludeConfig = field(default_factory=FludeConfig)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed, env=replace(self.env, seed=seed))

    def with_variant(self, variant: str) -> "Scenario":
        return replace(self, variant=variant)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["env"] = self.env.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


_TOP = ("seed", "rounds", "variant", "target_accuracy", "final_window")
_SECTIONS = {"env": EnvConfig, "task": TaskConfig, "trainer": TrainerConfig, "flude": FludeConfig}


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _integer(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _check(errors, where, ok, message):
    if not ok:
        errors.append(f"{where}: {message}")


def _validate_values(data: dict, errors: list[str]) -> None:
    top = {k: data[k] for k in _TOP if k in data}
    if "seed" in top:
        _check(errors, "seed", _integer(top["seed"]) and top["seed"] >= 0, "must be a non-negative integer")
    if "rounds" in top:
        _check(errors, "rounds", _integer(top["rounds"]) and top["rounds"] >= 0, "must be a non-negative integer")
    if "variant" in top:
        _check(errors, "variant", top["variant"] in VARIANTS, f"must be one of {list(VARIANTS)}")
    if "target_accuracy" in top:
        v = top["target_accuracy"]
        _check(errors, "target_accuracy", _number(v) and 0 <= v <= 1.01, "must lie in [0, 1.01]")
    if "final_window" in top:
        _check(errors, "final_window", _integer(top["final_window"]) and top["final_window"] >= 1, "must be >= 1")

    env = data.get("env", {})
    if "n_devices" in env:
        _check(errors, "env.n_devices", _integer(env["n_devices"]) and env["n_devices"] >= 1, "must be >= 1")
    if "group_means" in env:
        gm = env["group_means"]
        _check(
            errors,
            "env.group_means",
            isinstance(gm, list) and gm and all(_number(m) and 0 <= m < 1 for m in gm),
            "must be a non-empty list of values in [0, 1)",
        )
    if "group_variance" in env:
        _check(errors, "env.group_variance", _number(env["group_variance"]) and env["group_variance"] > 0, "must be > 0")
    if "online_interval_s" in env:
        _check(errors, "env.online_interval_s", _number(env["online_interval_s"]) and env["online_interval_s"] > 0, "must be > 0")
    if "bandwidth_range" in env:
        br = env["bandwidth_range"]
        _check(
            errors,
            "env.bandwidth_range",
            isinstance(br, list) and len(br) == 2 and all(_number(b) for b in br) and 0 < br[0] <= br[1],
            "must be [min, max] with 0 < min <= max",
        )
    if "per_sample_seconds" in env:
        ps = env["per_sample_seconds"]
        _check(
            errors,
            "env.per_sample_seconds",
            isinstance(ps, dict)
            and set(ps) == set(CAPABILITY_CLASSES)
            and all(_number(v) and v > 0 for v in ps.values()),
            f"must map each of {list(CAPABILITY_CLASSES)} to a positive number",
        )
    if "seed" in env:
        _check(errors, "env.seed", _integer(env["seed"]) and env["seed"] >= 0, "must be a non-negative integer")

    task = data.get("task", {})
    for key in ("n_classes", "dim", "samples_per_device", "classes_per_device", "test_per_class"):
        if key in task:
            _check(errors, f"task.{key}", _integer(task[key]) and task[key] >= 1, "must be a positive integer")
    if "mean_separation" in task:
        _check(errors, "task.mean_separation", _number(task["mean_separation"]) and task["mean_separation"] > 0, "must be > 0")
    n_classes = task.get("n_classes", TaskConfig.n_classes)
    cpd = task.get("classes_per_device", TaskConfig.classes_per_device)
    if _integer(n_classes) and _integer(cpd):
        _check(errors, "task.classes_per_device", cpd <= n_classes, "cannot exceed n_classes")

    tr = data.get("trainer", {})
    if "batch_size" in tr:
        _check(errors, "trainer.batch_size", _integer(tr["batch_size"]) and tr["batch_size"] >= 1, "must be >= 1")
    if "learning_rate" in tr:
        _check(errors, "trainer.learning_rate", _number(tr["learning_rate"]) and tr["learning_rate"] > 0, "must be > 0")
    if "local_pass_fraction" in tr:
        v = tr["local_pass_fraction"]
        _check(errors, "trainer.local_pass_fraction", _number(v) and 0 < v <= 1, "must lie in (0, 1]")
    if "hidden" in tr:
        _check(errors, "trainer.hidden", _integer(tr["hidden"]) and tr["hidden"] >= 0, "must be a non-negative integer")

    fl = data.get("flude", {})
    positive = ("deadline_s", "w0", "base_cache_interval_s")
    non_negative = ("sigma", "lam", "mu", "w_min")
    unit = ("epsilon0", "epsilon_decay", "epsilon_floor")
    for key in positive:
        if key in fl:
            _check(errors, f"flude.{key}", _number(fl[key]) and fl[key] > 0, "must be > 0")
    for key in non_negative:
        if key in fl:
            _check(errors, f"flude.{key}", _number(fl[key]) and fl[key] >= 0, "must be >= 0")
    for key in unit:
        if key in fl:
            _check(errors, f"flude.{key}", _number(fl[key]) and 0 <= fl[key] <= 1, "must lie in [0, 1]")
    for key in ("prior_alpha", "prior_beta"):
        if key in fl:
            _check(errors, f"flude.{key}", _number(fl[key]) and fl[key] > 0, "must be > 0")
    if "budget" in fl:
        _check(errors, "flude.budget", _number(fl["budget"]) and fl["budget"] >= 2, "must be >= 2 (one download plus one upload)")
    if "max_participants" in fl:
        _check(errors, "flude.max_participants", _integer(fl["max_participants"]) and fl["max_participants"] >= 1, "must be >= 1")
    if "ticks_per_pass" in fl:
        _check(errors, "flude.ticks_per_pass", _integer(fl["ticks_per_pass"]) and fl["ticks_per_pass"] >= 1, "must be >= 1")
    if "w_max" in fl:
        _check(errors, "flude.w_max", _number(fl["w_max"]) and fl["w_max"] >= fl.get("w_min", FludeConfig.w_min), "must be >= w_min")
    if "payload_mb" in fl:
        v = fl["payload_mb"]
        _check(errors, "flude.payload_mb", v is None or (_number(v) and v > 0), "must be null or > 0")
    if "cache_policy" in fl:
        _check(errors, "flude.cache_policy", fl["cache_policy"] in CACHE_POLICIES, f"must be one of {list(CACHE_POLICIES)}")


def scenario_from_dict(data) -> Scenario:
    """Resolve defaults and validate; every problem is reported in one ScenarioError."""
    if not isinstance(data, dict):
        raise ScenarioError(["scenario must be a JSON object"])
    errors = []
    for key in sorted(set(data) - set(_TOP) - set(_SECTIONS)):
        errors.append(f"unknown key {key!r}")
    for name, cls in _SECTIONS.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            errors.append(f"{name}: must be an object")
            continue
        allowed = {f.name for f in fields(cls)}
        for key in sorted(set(section) - allowed):
            errors.append(f"unknown key {name}.{key!r}")
    if errors:
        raise ScenarioError(errors)
    _validate_values(data, errors)
    if errors:
        raise ScenarioError(errors)

    seed = data.get("seed", 0)
    env_data = {**EnvConfig().to_dict(), "seed": seed, **data.get("env", {})}
    env = EnvConfig.from_dict(env_data)
    return Scenario(
        **{k: data[k] for k in _TOP if k in data},
        env=env,
        task=TaskConfig(**data.get("task", {})),
        trainer=TrainerConfig(**data.get("trainer", {})),
        flude=FludeConfig(**data.get("flude", {})),
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"{path}: invalid JSON ({exc})"]) from exc
    return scenario_from_dict(data)


def validate_scenario(path) -> tuple[Scenario | None, list[str]]:
    try:
        return load_scenario(path), []
    except ScenarioError as exc:
        return None, exc.errors
