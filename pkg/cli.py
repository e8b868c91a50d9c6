"""
Command-line front door for the rigidity experiments.

Subcommands: sample, drift-check, simulate, msd, rigidity, compare run one
experiment; run takes the experiment from the config file; traj-info prints
a trajectory header. Settings resolve as flags > COULOMB_RIGIDITY_OUT (output
prefix only) > config file > defaults.
"""

import argparse
import copy
import json
import logging
import math
import os
import sys
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import yaml
from sqlalchemy.exc import SQLAlchemyError

from database import ExperimentRun, Registry
from diagnostics import (Harness, ModelArm, ginibre_arm, index_of_dispersion, number_variance, ruelle_arm,
                         run_arm, self_diffusion_compare, stationarity_report)
from drift import TruncationScheme, drift_at, drift_identity_gap
from dynamics import IntegratorConfig, read_header, simulate_replicas
from pointfields import (Configuration, LogGasDensity, Window, ginibre_radii_check, sample_ginibre_eigenvalues,
                         sample_gue_eigenvalues, sample_loggas_mcmc, sample_poisson, save_configurations)
from potentials import FreePotential, PotentialSpec
from utils import (CODE_VERSION, ConfigError, DomainError, InitializationError, RigidityError,
                   SingularityError, StepFailure, dumps_record, replica_seed, write_jsonl, write_table)

logger = logging.getLogger(__name__)

EXPERIMENTS = ("sample", "drift-check", "simulate", "msd", "rigidity", "compare")
OUTPUT_ENV = "COULOMB_RIGIDITY_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
EXIT_DOMAIN = 5

SEED_LIMIT = 2 ** 64
CONTROL_STREAM = 1  # seed stream of the Poisson controls

# Every key that a config file may set, with its default. The fully
# defaulted config is the Ginibre drift check at N = 256.
DEFAULTS: Dict[str, Dict] = {
    "model": {
        "gamma": 2.0,
        "dim": 2,
        "beta": 2.0,
        "free_kind": "harmonic",
        "free_coefficient": 1.0,
        "scheme_kind": "origin",
        "scheme_radius": math.inf,
        "n": 256,
    },
    "sampler": {
        "method": "auto",  # auto, metropolis, ginibre, gue, poisson
        "sweeps": 200,
        "burn_in": None,  # None: 100 N sweeps
        "proposal_scale": None,  # None: 0.5/sqrt(intensity)
        "poisson_intensity": 1.0 / math.pi,
    },
    "integrator": {
        "dt": 1e-4,
        "steps": 1000,
        "taming_cap": 50.0,
        "min_separation": 1e-4,
        "record_every": 10,
        "max_retries": 100,
    },
    "harness": {
        "replicas": 50,
        "gap_fractions": [0.2, 0.4, 0.6, 0.8],
        "shell_radii": [4.0, 8.0, 16.0],
        "variance_radii": [1.0, 2.0, 4.0, 8.0],
        "bulk_fraction": 0.5,
        "window": None,  # MSD fit window [t_lo, t_hi]; None: last decade
        "control_gamma": 5.0,
        "control_radius": math.inf,
        "threads": 1,
    },
    "output": {
        "prefix": "out/",
        "format": "csv",
        "registry": None,
    },
}


class ExperimentConfig:
    """
    Resolved settings of one experiment run.

    Args:
        experiment: one of EXPERIMENTS
        seed: master seed; replica k uses replica_seed(seed, k)
        sections: partial section mappings layered over DEFAULTS
    """

    def __init__(self, experiment: str = "drift-check", seed: int = 0, sections: Optional[Dict] = None):
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"Unknown experiment: {experiment!r}")
        self.experiment = experiment
        self.seed = _as_int("seed", seed)
        if not 0 <= self.seed < SEED_LIMIT:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        self.sections = copy.deepcopy(DEFAULTS)
        for section, values in (sections or {}).items():
            self.update(section, values)
        self._validate()

    def update(self, section: str, values: Dict) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"Unknown config section: {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"Section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"Unknown key {section}.{key}")
            self.sections[section][key] = value

    def _validate(self) -> None:
        model, integrator, output = self.sections["model"], self.sections["integrator"], self.sections["output"]
        if output["format"] not in ("csv", "jsonl"):
            raise ConfigError(f"output.format must be csv or jsonl, got {output['format']!r}")
        try:
            self.spec()
            self.scheme()
            self.integrator()
        except (DomainError, TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if _as_int("model.n", model["n"]) < 1:
            raise ConfigError("model.n must be positive")
        if _as_int("harness.replicas", self.sections["harness"]["replicas"]) < 1:
            raise ConfigError("harness.replicas must be positive")
        _as_int("integrator.steps", integrator["steps"])

    def __getitem__(self, section: str) -> Dict:
        return self.sections[section]

    @property
    def n(self) -> int:
        return int(self.sections["model"]["n"])

    @property
    def replicas(self) -> int:
        return int(self.sections["harness"]["replicas"])

    @property
    def threads(self) -> int:
        return int(self.sections["harness"]["threads"])

    @property
    def prefix(self) -> str:
        return str(self.sections["output"]["prefix"])

    @property
    def fmt(self) -> str:
        return self.sections["output"]["format"]

    def spec(self) -> PotentialSpec:
        m = self.sections["model"]
        return PotentialSpec(gamma=float(m["gamma"]), dim=int(m["dim"]), beta=float(m["beta"]),
                             free=FreePotential(m["free_kind"], float(m["free_coefficient"])))

    def scheme(self) -> TruncationScheme:
        m = self.sections["model"]
        return TruncationScheme(m["scheme_kind"], float(m["scheme_radius"]))

    def integrator(self) -> IntegratorConfig:
        i = self.sections["integrator"]
        return IntegratorConfig(dt=float(i["dt"]), steps=int(i["steps"]), taming_cap=float(i["taming_cap"]),
                                min_separation=float(i["min_separation"]), record_every=int(i["record_every"]),
                                seed=self.seed, max_retries=int(i["max_retries"]))

    def to_dict(self) -> Dict:
        return {"experiment": self.experiment, "seed": self.seed, **copy.deepcopy(self.sections)}

    @classmethod
    def from_dict(cls, data: Dict, require_experiment: bool = True) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("Config must be a mapping of sections")
        data = dict(data)
        if require_experiment and "experiment" not in data:
            raise ConfigError("Config is missing the 'experiment' key")
        experiment = data.pop("experiment", "drift-check")
        seed = data.pop("seed", 0)
        return cls(experiment, seed, data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str, require_experiment: bool = True) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Config is not valid YAML: {e}") from e
        return cls.from_dict(data, require_experiment)


def _as_int(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return int(value)


def _parse_override(text: str):
    """section.key=value with a YAML-typed value"""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"Override must look like section.key=value, got {text!r}")
    path, raw = text.split("=", 1)
    section, key = path.split(".", 1)
    try:
        return section, key, yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"Bad override value in {text!r}: {e}") from e


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """
    Build the config from defaults, the config file, the environment and flags.
    """
    data: Dict = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"Cannot read config file {args.config}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"Config is not valid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("Config must be a mapping of sections")

    if args.command == "run":
        if "experiment" not in data:
            raise ConfigError("Config is missing the 'experiment' key")
    else:
        data["experiment"] = args.command

    sections = {}
    for section, values in data.items():
        if section in ("experiment", "seed"):
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"Section {section!r} must be a mapping")
        sections[section] = dict(values)
    env_prefix = os.getenv(OUTPUT_ENV)
    if env_prefix:
        sections.setdefault("output", {})["prefix"] = env_prefix

    flag_values = {
        ("output", "prefix"): args.out,
        ("output", "format"): args.format,
        ("harness", "threads"): args.threads,
        ("harness", "replicas"): args.replicas,
        ("model", "n"): args.n,
        ("model", "gamma"): args.gamma,
        ("model", "dim"): args.dim,
        ("model", "beta"): args.beta,
        ("integrator", "steps"): args.steps,
        ("integrator", "dt"): args.dt,
    }
    for (section, key), value in flag_values.items():
        if value is not None:
            sections.setdefault(section, {})[key] = value
    for text in args.set or []:
        section, key, value = _parse_override(text)
        sections.setdefault(section, {})[key] = value

    seed = args.seed if args.seed is not None else data.get("seed", 0)
    return ExperimentConfig(data["experiment"], seed, sections)


class ArtifactWriter:
    """
    Writes every artifact under the output prefix, each with the provenance header.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.prefix = config.prefix
        self.paths: List[str] = []
        self.provenance = {
            "experiment": config.experiment,
            "seed": config.seed,
            "config": config.to_dict(),
            "code_version": CODE_VERSION,
        }

    def prepare(self) -> None:
        directory = os.path.dirname(self.prefix)
        if directory:
            os.makedirs(directory, exist_ok=True)
        if not os.access(directory or ".", os.W_OK):
            raise PermissionError(f"Output prefix {self.prefix} is not writable")

    def path(self, name: str) -> str:
        path = f"{self.prefix}{name}"
        self.paths.append(path)
        return path

    def table(self, name: str, frame: pd.DataFrame) -> str:
        path = self.path(f"{name}.{self.config.fmt}")
        write_table(frame, path, self.config.fmt, self.provenance)
        logger.info("Wrote %s", path)
        return path

    def summary(self, name: str, summary: Dict) -> str:
        path = self.path(f"{name}.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(json.loads(dumps_record({"provenance": self.provenance, "summary": summary})),
                               indent=2, sort_keys=True))
            f.write("\n")
        logger.info("Wrote %s", path)
        return path


def is_ginibre(spec: PotentialSpec) -> bool:
    return spec == PotentialSpec.ginibre()


def is_dyson(spec: PotentialSpec) -> bool:
    return spec == PotentialSpec.dyson(2.0)


def sample_one(config: ExperimentConfig, replica: int) -> Configuration:
    """
    Equilibrium sample for one replica: exact matrix-model sampling for the
    Ginibre and Dyson beta=2 models under method auto, Metropolis otherwise.
    """
    spec, sampler = config.spec(), config["sampler"]
    seed = replica_seed(config.seed, replica)
    method = sampler["method"]
    if method == "auto":
        method = "ginibre" if is_ginibre(spec) else "gue" if is_dyson(spec) else "metropolis"
    if method == "ginibre":
        return sample_ginibre_eigenvalues(config.n, seed)
    if method == "gue":
        return sample_gue_eigenvalues(config.n, seed)
    if method == "poisson":
        intensity = float(sampler["poisson_intensity"])
        return sample_poisson(intensity, _poisson_window(config.n, intensity, spec.dim), seed)
    if method == "metropolis":
        return sample_loggas_mcmc(LogGasDensity(spec, config.n), int(sampler["sweeps"]), sampler["burn_in"],
                                  sampler["proposal_scale"], seed)
    raise ConfigError(f"Unknown sampler method: {method!r}")


def _poisson_window(n: int, intensity: float, dim: int) -> Window:
    # window of expected count n
    if dim == 2:
        return Window.disk(math.sqrt(n / (math.pi * intensity)))
    half = n / (2.0 * intensity)
    return Window.box([-half], [half])


def run_sample(config: ExperimentConfig, out: ArtifactWriter) -> Dict:
    configs = [sample_one(config, k) for k in range(config.replicas)]
    save_configurations(out.path("samples.jsonl"), configs)
    rows = [{"replica": k, "n": c.n, "sum_sq": float(np.sum(c.points ** 2)),
             "min_separation": c.min_separation()} for k, c in enumerate(configs)]
    frame = pd.DataFrame(rows)
    out.table("sample_stats", frame)
    summary = {"replicas": len(configs), "sum_sq_mean": float(frame["sum_sq"].mean())}
    if config.spec().dim == 2 and all(c.n for c in configs):
        summary["max_sq_radius_mean"] = float(np.mean([ginibre_radii_check(c)["max_sq_radius"] for c in configs]))
    return summary


def run_drift_check(config: ExperimentConfig, out: ArtifactWriter) -> Dict:
    """
    Drift-identity gap and shell increments on Ginibre samples, with a
    Poisson control at matched intensity.
    """
    h = config["harness"]
    n = config.n
    radii = [f * math.sqrt(n) for f in h["gap_fractions"]]
    shells = [float(r) for r in h["shell_radii"]]
    beta = config.spec().beta
    free_spec = PotentialSpec(gamma=2.0, dim=2, beta=beta)
    scheme = TruncationScheme.particle(shells[-1])
    intensity = 1.0 / math.pi

    gap_rows, increment_rows, partial_records = [], [], []
    for k in range(config.replicas):
        ginibre = sample_ginibre_eigenvalues(n, replica_seed(config.seed, k))
        tag = 0  # labels follow the modulus, so 0 is the innermost particle
        for r in radii:
            gap_rows.append({"replica": k, "radius": r, "gap": drift_identity_gap(ginibre, tag, r, beta)})
        poisson = sample_poisson(intensity, Window.disk(math.sqrt(n)), replica_seed(config.seed, k, CONTROL_STREAM))
        for name, sample in (("ginibre", ginibre), ("poisson", poisson)):
            if sample.n < 2:
                continue
            x = sample.position(0)
            result = drift_at(x, sample, free_spec, scheme, exclude=0, radius_schedule=shells)
            partial_records.append({"replica": k, "field": name, **result.to_dict()})
            inc = result.increments()
            row = {"replica": k, "field": name}
            for j in range(inc.size):
                row[f"inc_{shells[j]:g}_{shells[j + 1]:g}"] = float(inc[j])
            row["ratio"] = float(inc[-1] / inc[0]) if inc.size >= 2 and inc[0] > 0 else math.nan
            increment_rows.append(row)

    gaps = pd.DataFrame(gap_rows)
    medians = gaps.groupby("radius", sort=True)["gap"].median().reset_index()
    medians.columns = ["radius", "median_gap"]
    out.table("gap_medians", medians)
    increments = pd.DataFrame(increment_rows)
    out.table("shell_increments", increments)
    write_jsonl(out.path("drift_partials.jsonl"), [{"provenance": out.provenance}, *partial_records])

    inc_columns = [c for c in increments.columns if c.startswith("inc_")]
    summary = {"n": n, "replicas": config.replicas,
               "median_gap": dict(zip([float(r) for r in medians["radius"]], medians["median_gap"].tolist())),
               "gap_decreases": bool(medians["median_gap"].iloc[-1] < medians["median_gap"].iloc[0])}
    for name in ("ginibre", "poisson"):
        part = increments[increments["field"] == name]
        med = [float(part[c].median()) for c in inc_columns]
        summary[name] = {
            "median_increments": dict(zip(inc_columns, med)),
            "increments_decrease": all(b < a for a, b in zip(med, med[1:])),
            "median_ratio": float(part["ratio"].median()),
        }
    return summary


def run_simulate(config: ExperimentConfig, out: ArtifactWriter) -> Dict:
    initials = [sample_one(config, k) for k in range(config.replicas)]
    trajectories = simulate_replicas(initials, config.spec(), config.scheme(), config.integrator(), config.threads)
    for k, traj in enumerate(trajectories):
        traj.save(out.path(f"traj_{k:04d}.jsonl"))
    report = stationarity_report(trajectories)
    rows = [{"replica": k, "sum_sq_start": float(np.sum(t.positions[0] ** 2)),
             "sum_sq_end": float(np.sum(t.positions[-1] ** 2)),
             "tamed_fraction": t.stats["tamed_fraction"], "rejected_fraction": t.stats["rejected_fraction"]}
            for k, t in enumerate(trajectories)]
    out.table("stationarity", pd.DataFrame(rows))
    return report


def _harness(config: ExperimentConfig) -> Harness:
    h = config["harness"]
    window = tuple(h["window"]) if h["window"] is not None else None
    return Harness(n=config.n, replicas=config.replicas, integrator=config.integrator(), window=window,
                   seed=config.seed, threads=config.threads)


def run_msd(config: ExperimentConfig, out: ArtifactWriter) -> Dict:
    harness = _harness(config)
    arm = ModelArm("model", config.spec(), config.scheme())
    initials = [sample_one(config, k) for k in range(config.replicas)]
    result = run_arm(arm, harness, initials)
    out.table("msd", result["series"].to_frame())
    return {"model": arm.to_dict(), "harness": harness.to_dict(), "exponent": result["exponent"].to_dict(),
            "ratio_trend": result["ratio_trend"]}


def run_rigidity(config: ExperimentConfig, out: ArtifactWriter) -> Dict:
    """
    Number variance of Ginibre samples against a Poisson control of the same
    intensity; radii beyond bulk_fraction * sqrt(N) are flagged.
    """
    h = config["harness"]
    n = config.n
    radii = [float(r) for r in h["variance_radii"]]
    bulk = float(h["bulk_fraction"]) * math.sqrt(n)
    ginibre = [sample_ginibre_eigenvalues(n, replica_seed(config.seed, k)) for k in range(config.replicas)]
    poisson = [sample_poisson(1.0 / math.pi, Window.disk(math.sqrt(n)), replica_seed(config.seed, k, CONTROL_STREAM))
               for k in range(config.replicas)]
    g_series = number_variance(ginibre, radii, bulk_radius=bulk)
    p_series = number_variance(poisson, radii, bulk_radius=bulk)
    out.table("variance_ginibre", g_series.to_frame())
    out.table("variance_poisson", p_series.to_frame())
    dispersion = index_of_dispersion(p_series)
    out.table("dispersion_poisson", pd.DataFrame(dispersion))

    bulk_mask = ~g_series.beyond_bulk
    per_area = g_series.variance_per_area()[bulk_mask]
    return {
        "n": n,
        "replicas": config.replicas,
        "bulk_radius": bulk,
        "ginibre_variance_per_area": per_area.tolist(),
        "ginibre_strictly_decreasing": bool(np.all(np.diff(per_area) < 0)),
        "poisson_within_3sigma": all(row["within_3sigma"] for row in dispersion),
    }


def run_compare(config: ExperimentConfig, out: ArtifactWriter) -> Dict:
    h = config["harness"]
    harness = _harness(config)
    report = self_diffusion_compare(ginibre_arm(), ruelle_arm(float(h["control_gamma"]), float(h["control_radius"])),
                                    harness)
    for name, series in report.pop("series").items():
        out.table(f"msd_{name}", series.to_frame())
    return report


RUNNERS = {
    "sample": run_sample,
    "drift-check": run_drift_check,
    "simulate": run_simulate,
    "msd": run_msd,
    "rigidity": run_rigidity,
    "compare": run_compare,
}


def run(config: ExperimentConfig, registry: Optional[Registry] = None) -> int:
    """
    Execute one experiment and write its artifacts.

    Returns:
        Process exit status
    """
    out = ArtifactWriter(config)
    out.prepare()
    record = None
    if registry is not None and registry.enabled:
        with registry.session() as db:
            record = ExperimentRun.create(db, config.experiment, config.seed,
                                          json.loads(dumps_record(config.to_dict())), CODE_VERSION)
    logger.info("Starting %s (seed=%d, prefix=%s)", config.experiment, config.seed, config.prefix)
    try:
        summary = RUNNERS[config.experiment](config, out)
        out.summary("summary", summary)
    except Exception as e:
        if record is not None:
            with registry.session() as db:
                db.merge(record).mark_failed(db, {"error": type(e).__name__, "message": str(e)})
        raise
    if record is not None:
        with registry.session() as db:
            db.merge(record).mark_finished(db, out.paths, json.loads(dumps_record(summary)))
    logger.info("Finished %s: %d artifacts", config.experiment, len(out.paths))
    return EXIT_OK


def traj_info(path: str) -> int:
    print(json.dumps(json.loads(dumps_record(read_header(path))), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coulomb-rigidity",
                                     description="Simulate and analyse Riesz/Coulomb interacting Brownian motions")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file with sections model/sampler/integrator/harness/output")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="replica-level parallel jobs")
    common.add_argument("--out", help=f"output prefix (env {OUTPUT_ENV})")
    common.add_argument("--format", choices=("csv", "jsonl"), help="table format")
    common.add_argument("--n", type=int, help="particle count (model.n)")
    common.add_argument("--replicas", type=int, help="number of replicas (harness.replicas)")
    common.add_argument("--gamma", type=float, help="Riesz exponent (model.gamma)")
    common.add_argument("--dim", type=int, help="spatial dimension (model.dim)")
    common.add_argument("--beta", type=float, help="inverse temperature (model.beta)")
    common.add_argument("--steps", type=int, help="integrator steps")
    common.add_argument("--dt", type=float, help="integrator time step")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override any config key, repeatable")
    common.add_argument("--registry", help="SQLAlchemy URL of the run registry (env DATABASE_URL)")
    common.add_argument("--log-level", default="INFO", help="logging level")

    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common], help=f"run the {name} experiment")
    sub.add_parser("run", parents=[common], help="run the experiment named in --config")
    info = sub.add_parser("traj-info", help="print the header of a trajectory file")
    info.add_argument("path")
    info.add_argument("--log-level", default="INFO")
    return parser


def _fail(error: Exception, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(error).__name__, "message": str(error), "exit_code": code}) + "\n")
    return code


def exit_code_for(error: Exception) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (OSError, SQLAlchemyError)):
        return EXIT_IO
    if isinstance(error, (StepFailure, SingularityError, InitializationError)):
        return EXIT_NUMERICAL
    if isinstance(error, DomainError):
        return EXIT_DOMAIN
    return EXIT_DOMAIN


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "traj-info":
            return traj_info(args.path)
        config = resolve_config(args)
        registry_url = args.registry or config["output"]["registry"]
        registry = Registry(registry_url) if registry_url or os.getenv("DATABASE_URL") else None
        return run(config, registry)
    except (RigidityError, OSError, SQLAlchemyError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return _fail(e, exit_code_for(e))


if __name__ == "__main__":
    sys.exit(main())
