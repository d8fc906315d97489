import csv
import json
import signal
import subprocess
import sys
import time

import numpy as np
import pytest

from fludesim.checkpoint import read_checkpoint, write_checkpoint
from fludesim.cli import main
from fludesim.round_engine import Simulation
from fludesim.scenario import ScenarioError, scenario_from_dict, validate_scenario

TINY = {
    "seed": 2,
    "rounds": 8,
    "env": {"n_devices": 30},
    "task": {"n_classes": 4, "dim": 6, "samples_per_device": 40, "classes_per_device": 2},
    "flude": {"budget": 15, "max_participants": 8},
}
OUTPUTS = ("round_log.csv", "selection_trace.csv", "distribution_log.csv", "summary.csv", "curve.dat")


def _write(path, data):
    path.write_text(json.dumps(data))
    return path


def test_checkpoint_round_trip(tmp_path):
    arrays = {"global": np.float32([1.5, -0.0, np.pi]), "cache/000003": np.arange(5, dtype=np.float32)}
    state = {"round": 4, "nested": {"x": [1, 2.5, None]}}
    write_checkpoint(tmp_path / "c.bin", state, arrays)
    got_state, got = read_checkpoint(tmp_path / "c.bin")
    assert got_state == state
    for name, arr in arrays.items():
        assert got[name].tobytes() == arr.tobytes()
    assert not (tmp_path / "c.bin.tmp").exists()


def test_checkpoint_rejects_foreign_or_truncated_files(tmp_path):
    (tmp_path / "x.bin").write_bytes(b'{"format": "other"}\n')
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "x.bin")
    write_checkpoint(tmp_path / "c.bin", {}, {"a": np.zeros(10, np.float32)})
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "c.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "c.bin")


def test_minimal_scenario_gets_defaults(tmp_path, capsys):
    path = _write(tmp_path / "s.json", {"seed": 3})
    scenario, errors = validate_scenario(path)
    assert errors == []
    fl = scenario.flude
    assert (fl.sigma, fl.lam, fl.mu, fl.epsilon0) == (0.5, 1.0, 0.5, 0.9)
    assert (fl.epsilon_decay, fl.epsilon_floor) == (0.98, 0.2)
    assert scenario.env.seed == 3
    assert main(["validate", "--scenario", str(path)]) == 0
    assert json.loads(capsys.readouterr().out)["flude"]["sigma"] == 0.5


def test_out_of_range_values_are_all_listed(tmp_path, capsys):
    path = _write(tmp_path / "s.json", {"flude": {"sigma": -1, "budget": 1}, "rounds": -2})
    _, errors = validate_scenario(path)
    joined = "\n".join(errors)
    assert "sigma" in joined and "budget" in joined and "rounds" in joined
    assert main(["validate", "--scenario", str(path)]) != 0
    assert "sigma" in capsys.readouterr().err


@pytest.mark.parametrize("data", [{"sigma_typo": 1}, {"flude": {"sigma_typo": 1}}])
def test_unknown_keys_are_rejected_by_name(data):
    with pytest.raises(ScenarioError) as err:
        scenario_from_dict(data)
    assert "sigma_typo" in str(err.value)


def test_invalid_json(tmp_path):
    (tmp_path / "bad.json").write_text("{seed: 1")
    _, errors = validate_scenario(tmp_path / "bad.json")
    assert errors and "invalid JSON" in errors[0]


def test_run_writes_logs_and_summary(tmp_path):
    path = _write(tmp_path / "s.json", TINY)
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "out"), "--quiet"]) == 0
    with open(tmp_path / "out" / "round_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert list(rows[0]) == ["round", "n_online", "n_selected", "n_distributed", "n_resumed", "n_uploaded",
                             "n_interrupted", "duration_s", "W", "epsilon", "cum_download", "cum_upload",
                             "train_loss", "test_acc"]
    with open(tmp_path / "out" / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 1


def test_run_requires_an_output_directory(tmp_path):
    path = _write(tmp_path / "s.json", TINY)
    with pytest.raises(SystemExit):
        main(["run", "--scenario", str(path)])


def test_missing_scenario_exits_nonzero(tmp_path, capsys):
    assert main(["run", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_compare_counts_rows(tmp_path, monkeypatch):
    monkeypatch.setenv("FLUDE_SIM_THREADS", "1")
    path = _write(tmp_path / "s.json", {**TINY, "rounds": 2})
    assert main(["compare", "--scenario", str(path), "--seeds", "5", "--out", str(tmp_path / "cmp"), "--quiet"]) == 0
    with open(tmp_path / "cmp" / "summaries.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20
    assert {(r["variant"], r["seed"]) for r in rows} == {
        (v, str(s)) for v in ("flude", "random_selection", "full_distribution", "least_distribution")
        for s in range(2, 7)
    }
    with open(tmp_path / "cmp" / "comparison.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4


def _outputs(directory):
    return {name: (directory / name).read_bytes() for name in OUTPUTS}


@pytest.mark.parametrize("variant", ["flude", "fedavg"])
@pytest.mark.parametrize("stop", [1, 4, 7])
def test_resume_from_every_kind_of_boundary(tmp_path, stop, variant):
    path = _write(tmp_path / "s.json", {**TINY, "variant": variant})
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "full"), "--quiet"]) == 0

    sim = Simulation(scenario_from_dict({**TINY, "variant": variant}), out_dir=tmp_path / "split")
    sim.run(stop_after=stop)
    # simulate a crash after the logs were appended but before the next checkpoint
    with open(tmp_path / "split" / "round_log.csv", "a") as fh:
        fh.write("garbage from a half-written round\n")
    assert main(["resume", "--checkpoint", str(tmp_path / "split" / "checkpoint.bin"), "--quiet"]) == 0
    assert _outputs(tmp_path / "split") == _outputs(tmp_path / "full")


def test_kill_and_resume_subprocess(tmp_path):
    data = {**TINY, "rounds": 200}
    path = _write(tmp_path / "s.json", data)
    cmd = [sys.executable, "-m", "fludesim.cli", "run", "--scenario", str(path), "--quiet"]
    subprocess.run(cmd + ["--out", str(tmp_path / "full")], check=True)

    victim = subprocess.Popen(cmd + ["--out", str(tmp_path / "killed")])
    ckpt = tmp_path / "killed" / "checkpoint.bin"
    deadline = time.time() + 120
    while time.time() < deadline:
        if ckpt.exists() and read_checkpoint(ckpt)[0]["round"] >= 5:
            break
        time.sleep(0.01)
    victim.send_signal(signal.SIGKILL)
    victim.wait()
    reached = read_checkpoint(ckpt)[0]["round"]
    assert 5 <= reached < 200
    subprocess.run([sys.executable, "-m", "fludesim.cli", "resume", "--checkpoint", str(ckpt), "--quiet"],
                   check=True)
    assert _outputs(tmp_path / "killed") == _outputs(tmp_path / "full")
