import csv
import json
import math
import os

import pandas as pd
import pytest

import cli
from cli import (DEFAULTS, EXIT_CONFIG, EXIT_DOMAIN, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, OUTPUT_ENV,
                 ExperimentConfig, main)
from database import ExperimentRun, Registry
from drift import DriftResult
from dynamics import read_header
from potentials import PotentialSpec
from pointfields import Window, sample_poisson
from utils import ConfigError, replica_seed

SMALL_DRIFT = ["--n", "64", "--replicas", "3"]
SMALL_DYNAMICS = ["--n", "8", "--replicas", "3", "--steps", "100", "--dt", "1e-3"]


def read_provenance(path):
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    assert first.startswith("# ")
    return json.loads(first[2:])


def reject_constant(name):
    raise ValueError(f"non-standard JSON constant {name}")


def read_summary(prefix):
    with open(f"{prefix}summary.json", encoding="utf-8") as f:
        return json.load(f, parse_constant=reject_constant)


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


# ExperimentConfig

def test_defaults_are_the_ginibre_drift_check():
    config = ExperimentConfig()
    assert config.experiment == "drift-check"
    assert config.n == 256
    assert config.spec() == PotentialSpec.ginibre()
    assert config.scheme().kind == "origin"
    assert config.fmt == "csv"


def test_config_round_trips_through_yaml():
    config = ExperimentConfig("compare", seed=17, sections={"harness": {"replicas": 7, "window": [0.1, 1.0]},
                                                              "model": {"scheme_radius": 12.5}})
    again = ExperimentConfig.from_yaml(config.to_yaml())
    assert again.to_dict() == config.to_dict()
    assert again.to_yaml() == config.to_yaml()
    assert math.isinf(ExperimentConfig.from_yaml(ExperimentConfig().to_yaml())["model"]["scheme_radius"])


def test_every_default_is_documented_in_the_table():
    data = ExperimentConfig().to_dict()
    for section, values in DEFAULTS.items():
        assert set(data[section]) == set(values)


@pytest.mark.parametrize("text", [
    "seed: 1\nmodel: {n: 4}\n",
    "experiment: teleport\n",
    "experiment: msd\nmodel: {flavour: 3}\n",
    "experiment: msd\nwidgets: {n: 3}\n",
    "experiment: msd\noutput: {format: xlsx}\n",
    "experiment: msd\nmodel: {gamma: -1}\n",
    "experiment: msd\nmodel: {n: 2.5}\n",
    "experiment: [unclosed\n",
])
def test_malformed_configs_are_config_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(text)


# run

def test_default_drift_check_writes_medians_and_summary(tmp_path):
    prefix = str(tmp_path / "dc") + "/"
    assert main(["drift-check", *SMALL_DRIFT, "--out", prefix]) == EXIT_OK
    medians = pd.read_csv(f"{prefix}gap_medians.csv", comment="#")
    assert list(medians.columns) == ["radius", "median_gap"]
    assert medians["radius"].tolist() == pytest.approx([f * 8.0 for f in (0.2, 0.4, 0.6, 0.8)])
    provenance = read_provenance(f"{prefix}gap_medians.csv")
    assert provenance["experiment"] == "drift-check"
    assert provenance["seed"] == 0
    assert provenance["config"]["model"]["n"] == 64
    assert "code_version" in provenance

    increments = pd.read_csv(f"{prefix}shell_increments.csv", comment="#")
    assert set(increments["field"]) == {"ginibre", "poisson"}

    summary = read_summary(prefix)
    assert summary["provenance"]["seed"] == 0
    assert set(summary["summary"]) >= {"median_gap", "ginibre", "poisson", "gap_decreases"}


def test_drift_check_writes_drift_result_records(tmp_path):
    prefix = str(tmp_path / "dp") + "/"
    assert main(["drift-check", *SMALL_DRIFT, "--out", prefix]) == EXIT_OK
    with open(f"{prefix}drift_partials.jsonl", encoding="utf-8") as f:
        first, *records = [json.loads(line, parse_constant=reject_constant) for line in f]
    assert first["provenance"]["experiment"] == "drift-check"
    assert [(r["replica"], r["field"]) for r in records] == [(k, name) for k in range(3)
                                                             for name in ("ginibre", "poisson")]
    increments = pd.read_csv(f"{prefix}shell_increments.csv", comment="#")
    for record, (_, row) in zip(records, increments.iterrows()):
        result = DriftResult.from_dict(record)
        assert result.radii.tolist() == [4.0, 8.0, 16.0]
        assert result.value.tolist() == record["value"]
        assert result.increments().tolist() == pytest.approx([row["inc_4_8"], row["inc_8_16"]], rel=1e-12)


def test_csv_body_after_the_provenance_line_is_strict_csv(tmp_path):
    prefix = str(tmp_path / "csv") + "/"
    assert main(["drift-check", *SMALL_DRIFT, "--out", prefix]) == EXIT_OK
    with open(f"{prefix}shell_increments.csv", encoding="utf-8", newline="") as f:
        assert f.readline().startswith("# {")
        header, *rows = list(csv.reader(f, strict=True))
    assert header[:2] == ["replica", "field"]
    assert rows and all(len(row) == len(header) for row in rows)


def test_repeated_runs_are_byte_identical(tmp_path):
    prefix = str(tmp_path / "rep") + "/"
    names = ["gap_medians.csv", "shell_increments.csv", "drift_partials.jsonl", "summary.json"]
    assert main(["drift-check", *SMALL_DRIFT, "--seed", "5", "--out", prefix]) == EXIT_OK
    first = {name: open(prefix + name, "rb").read() for name in names}
    assert main(["drift-check", *SMALL_DRIFT, "--seed", "5", "--out", prefix]) == EXIT_OK
    second = {name: open(prefix + name, "rb").read() for name in names}
    assert first == second


def test_outputs_stay_under_the_prefix(tmp_path):
    prefix = str(tmp_path / "only" / "run_")
    assert main(["rigidity", *SMALL_DRIFT, "--out", prefix]) == EXIT_OK
    for root, _, files in os.walk(tmp_path):
        for name in files:
            assert os.path.join(root, name).startswith(prefix)


def test_missing_experiment_is_a_config_error_without_outputs(tmp_path, capsys):
    config_path = tmp_path / "bad.yaml"
    config_path.write_text("seed: 3\nmodel:\n  n: 16\n", encoding="utf-8")
    out_dir = tmp_path / "never"
    code = main(["run", "--config", str(config_path), "--out", str(out_dir) + "/"])
    assert code == EXIT_CONFIG
    assert not out_dir.exists()
    error = last_error(capsys)
    assert error["error"] == "ConfigError"
    assert error["exit_code"] == EXIT_CONFIG


def test_run_takes_the_experiment_from_the_file(tmp_path):
    config = ExperimentConfig("sample", seed=4, sections={"model": {"n": 6}, "harness": {"replicas": 2},
                                                          "output": {"prefix": str(tmp_path / "s") + "/"}})
    config_path = tmp_path / "sample.yaml"
    config_path.write_text(config.to_yaml(), encoding="utf-8")
    assert main(["run", "--config", str(config_path)]) == EXIT_OK
    summary = read_summary(str(tmp_path / "s") + "/")
    assert summary["provenance"]["experiment"] == "sample"
    assert summary["provenance"]["seed"] == 4
    assert summary["summary"]["replicas"] == 2


def test_flags_win_over_file_and_environment(tmp_path, monkeypatch):
    env_prefix = str(tmp_path / "env") + "/"
    monkeypatch.setenv(OUTPUT_ENV, env_prefix)
    config_path = tmp_path / "c.yaml"
    config_path.write_text("experiment: sample\nseed: 1\nmodel: {n: 20}\nharness: {replicas: 2}\n", encoding="utf-8")
    assert main(["run", "--config", str(config_path), "--n", "5", "--seed", "9"]) == EXIT_OK
    summary = read_summary(env_prefix)
    assert summary["provenance"]["seed"] == 9
    assert summary["provenance"]["config"]["model"]["n"] == 5

    flag_prefix = str(tmp_path / "flag") + "/"
    assert main(["sample", "--n", "5", "--replicas", "2", "--out", flag_prefix]) == EXIT_OK
    assert os.path.exists(f"{flag_prefix}summary.json")


def test_environment_prefix_wins_over_file(tmp_path, monkeypatch):
    env_prefix = str(tmp_path / "env") + "/"
    monkeypatch.setenv(OUTPUT_ENV, env_prefix)
    file_prefix = str(tmp_path / "file") + "/"
    config_path = tmp_path / "c.yaml"
    config_path.write_text(f"experiment: sample\nmodel: {{n: 4}}\nharness: {{replicas: 2}}\n"
                           f"output: {{prefix: '{file_prefix}'}}\n", encoding="utf-8")
    assert main(["run", "--config", str(config_path)]) == EXIT_OK
    assert os.path.exists(f"{env_prefix}summary.json")
    assert not (tmp_path / "file").exists()


def test_set_overrides_and_jsonl_format(tmp_path):
    prefix = str(tmp_path / "j") + "/"
    args = ["sample", "--replicas", "2", "--format", "jsonl", "--out", prefix,
            "--set", "model.n=5", "--set", "sampler.method=metropolis",
            "--set", "sampler.sweeps=3", "--set", "sampler.burn_in=2"]
    assert main(args) == EXIT_OK
    with open(f"{prefix}sample_stats.jsonl", encoding="utf-8") as f:
        lines = [json.loads(line) for line in f]
    assert lines[0]["provenance"]["config"]["sampler"]["method"] == "metropolis"
    assert [row["n"] for row in lines[1:]] == [5, 5]


def test_bad_override_is_a_config_error(tmp_path, capsys):
    assert main(["sample", "--out", str(tmp_path) + "/", "--set", "n=5"]) == EXIT_CONFIG
    assert last_error(capsys)["error"] == "ConfigError"


def test_unwritable_prefix_is_an_io_error(tmp_path, capsys):
    blocker = tmp_path / "file.txt"
    blocker.write_text("x", encoding="utf-8")
    code = main(["sample", "--n", "4", "--replicas", "2", "--out", str(blocker) + "/sub/"])
    assert code == EXIT_IO
    assert last_error(capsys)["exit_code"] == EXIT_IO


def test_domain_failure_exit_code(tmp_path, capsys):
    code = main(["drift-check", *SMALL_DRIFT, "--out", str(tmp_path) + "/",
                 "--set", "harness.gap_fractions=[0.000001]"])
    assert code == EXIT_DOMAIN
    assert last_error(capsys)["error"] == "DomainError"


def test_step_failure_exit_code(tmp_path, capsys):
    code = main(["simulate", "--n", "4", "--replicas", "1", "--steps", "3", "--out", str(tmp_path) + "/",
                 "--set", "integrator.min_separation=100.0", "--set", "integrator.max_retries=1"])
    assert code == EXIT_NUMERICAL
    assert last_error(capsys)["error"] == "StepFailure"


def test_simulate_writes_trajectories_and_traj_info(tmp_path, capsys):
    prefix = str(tmp_path / "sim") + "/"
    assert main(["simulate", *SMALL_DYNAMICS, "--out", prefix]) == EXIT_OK
    header = read_header(f"{prefix}traj_0000.jsonl")
    assert header["n"] == 8
    assert header["frames"] == 11
    summary = read_summary(prefix)
    assert summary["summary"]["replicas"] == 3
    capsys.readouterr()
    assert main(["traj-info", f"{prefix}traj_0002.jsonl"]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["format"] == header["format"]
    assert printed["provenance"]["spec"]["regime"] == "StrictCoulomb"


def test_msd_and_compare_experiments(tmp_path):
    prefix = str(tmp_path / "m") + "/"
    assert main(["msd", *SMALL_DYNAMICS, "--out", prefix]) == EXIT_OK
    frame = pd.read_csv(f"{prefix}msd.csv", comment="#")
    assert frame["msd"].iloc[0] == 0.0
    assert "exponent" in read_summary(prefix)["summary"]

    prefix = str(tmp_path / "c") + "/"
    assert main(["compare", *SMALL_DYNAMICS, "--out", prefix]) == EXIT_OK
    for arm in ("ginibre", "ruelle", "free"):
        assert os.path.exists(f"{prefix}msd_{arm}.csv")
    summary = read_summary(prefix)["summary"]
    assert set(summary["arms"]) == {"ginibre", "ruelle", "free"}
    assert "series" not in summary


def test_rigidity_experiment(tmp_path):
    prefix = str(tmp_path / "r") + "/"
    assert main(["rigidity", "--n", "256", "--replicas", "3", "--out", prefix]) == EXIT_OK
    frame = pd.read_csv(f"{prefix}variance_ginibre.csv", comment="#")
    assert frame["radius"].tolist() == DEFAULTS["harness"]["variance_radii"]
    assert not frame["beyond_bulk"].any()
    assert os.path.exists(f"{prefix}dispersion_poisson.csv")


def test_registry_records_runs(tmp_path):
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    prefix = str(tmp_path / "reg") + "/"
    args = ["sample", "--n", "4", "--replicas", "2", "--seed", "12", "--out", prefix, "--registry", url]
    assert main(args) == EXIT_OK
    registry = Registry(url)
    with registry.session() as db:
        runs = ExperimentRun.get_recent(db, "sample")
        assert len(runs) == 1
        assert runs[0].status == "finished"
        assert runs[0].master_seed == 12
        assert f"{prefix}summary.json" in runs[0].artifacts


def test_registry_records_failures(tmp_path):
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    code = main(["drift-check", *SMALL_DRIFT, "--out", str(tmp_path) + "/", "--registry", url,
                 "--set", "harness.gap_fractions=[0.000001]"])
    assert code == EXIT_DOMAIN
    with Registry(url).session() as db:
        run = ExperimentRun.get_recent(db)[0]
        assert run.status == "failed"
        assert run.error["error"] == "DomainError"


@pytest.mark.parametrize("seed", ["-1", str(2 ** 64)])
def test_seed_outside_unsigned_64_bits_is_a_config_error(tmp_path, capsys, seed):
    out_dir = tmp_path / "never"
    code = main(["sample", "--n", "4", "--replicas", "1", "--seed", seed, "--out", str(out_dir) + "/"])
    assert code == EXIT_CONFIG
    assert last_error(capsys)["error"] == "ConfigError"
    assert not out_dir.exists()
    with pytest.raises(ConfigError):
        ExperimentConfig("sample", seed=int(seed))


def test_registry_keeps_the_largest_seed(tmp_path):
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    seed = 2 ** 64 - 1
    args = ["sample", "--n", "4", "--replicas", "1", "--seed", str(seed), "--out", str(tmp_path / "big") + "/"]
    assert main([*args, "--registry", url]) == EXIT_OK
    with Registry(url).session() as db:
        [run] = ExperimentRun.find_by_seed(db, "sample", seed)
        assert run.master_seed == seed
        assert run.status == "finished"
        assert run.config["seed"] == seed
        assert run.config["model"]["scheme_radius"] == "inf"


def test_registry_marks_io_failures(tmp_path, monkeypatch, capsys):
    def lost_disk(config, out):
        raise OSError("disk went away")

    monkeypatch.setitem(cli.RUNNERS, "sample", lost_disk)
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    code = main(["sample", "--n", "4", "--replicas", "1", "--out", str(tmp_path / "io") + "/", "--registry", url])
    assert code == EXIT_IO
    assert last_error(capsys)["error"] == "OSError"
    with Registry(url).session() as db:
        run = ExperimentRun.get_recent(db)[0]
        assert run.status == "failed"
        assert run.error == {"error": "OSError", "message": "disk went away"}


def test_poisson_controls_use_their_own_seed_stream(tmp_path):
    prefix = str(tmp_path / "ctl") + "/"
    assert main(["drift-check", *SMALL_DRIFT, "--seed", "4", "--out", prefix]) == EXIT_OK
    with open(f"{prefix}drift_partials.jsonl", encoding="utf-8") as f:
        controls = [r for r in map(json.loads, f) if r.get("field") == "poisson"]
    assert len(controls) == 3
    for record in controls:
        k = record["replica"]
        expected = sample_poisson(1.0 / math.pi, Window.disk(8.0), replica_seed(4, k, cli.CONTROL_STREAM))
        assert record["x"] == expected.position(0).tolist()
        assert replica_seed(4, k, cli.CONTROL_STREAM) != replica_seed(5, k)


def test_trajectory_headers_are_strict_json(tmp_path):
    prefix = str(tmp_path / "strict") + "/"
    assert main(["simulate", *SMALL_DYNAMICS, "--out", prefix]) == EXIT_OK
    with open(f"{prefix}traj_0000.jsonl", encoding="utf-8") as f:
        header = json.loads(f.readline(), parse_constant=reject_constant)
    assert header["provenance"]["scheme"]["radius"] == "inf"
    control_radius = read_summary(prefix)["provenance"]["config"]["harness"]["control_radius"]
    assert math.isinf(float(control_radius))


@pytest.mark.slow
def test_drift_check_at_acceptance_size(tmp_path):
    prefix = str(tmp_path / "ac") + "/"
    assert main(["drift-check", "--n", "512", "--replicas", "50", "--out", prefix]) == EXIT_OK
    summary = read_summary(prefix)["summary"]
    assert summary["gap_decreases"]
    assert summary["ginibre"]["increments_decrease"]
    assert summary["poisson"]["median_ratio"] >= 0.8
