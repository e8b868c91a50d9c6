"""
Observables of the rigidity experiments.

Tagged-particle mean squared displacement and its effective exponent, the
diffusive rescaling eps * X_{t/eps^2}, number variance of disk counts,
stationarity checks and the matched comparison between the Ginibre dynamics
and diffusive controls.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import ks_2samp

from drift import TruncationScheme
from dynamics import IntegratorConfig, Trajectory, simulate_replicas
from pointfields import Configuration, sample_ginibre_eigenvalues
from potentials import FreePotential, PotentialSpec
from utils import DomainError, replica_seed, write_table

logger = logging.getLogger(__name__)

BOOTSTRAP_RESAMPLES = 1000


class MsdSeries:
    """
    Mean squared displacement of one label, averaged over replicas.

    per_replica keeps the squared displacement of every replica (shape
    (replicas, len(times))) for bootstrap confidence intervals; synthetic
    series may omit it.
    """

    def __init__(self, times, msd, replicas: int, tag: int, per_replica: Optional[np.ndarray] = None):
        self.times = np.asarray(times, dtype=float)
        self.msd = np.asarray(msd, dtype=float)
        self.replicas = int(replicas)
        self.tag = int(tag)
        self.per_replica = None if per_replica is None else np.asarray(per_replica, dtype=float)
        if self.times.shape != self.msd.shape:
            raise DomainError("times and msd must have the same length")
        if np.any(np.diff(self.times) <= 0):
            raise DomainError("MSD times must be strictly increasing")
        if np.any(self.msd < 0):
            raise DomainError("MSD values must be non-negative")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "t": self.times,
            "msd": self.msd,
            "msd_over_t": _ratio(self.msd, self.times),
            "replicas": self.replicas,
            "tag": self.tag,
        })

    def write(self, path: str, fmt: str = "csv", provenance: Optional[Dict] = None) -> None:
        """CSV or JSON-lines table, one row per grid point"""
        write_table(self.to_frame(), path, fmt, provenance)


def _ratio(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    out = np.full(values.shape, np.nan)
    positive = times > 0
    out[positive] = values[positive] / times[positive]
    return out


def _comparable(provenance: Dict) -> Dict:
    integrator = dict(provenance.get("integrator", {}))
    integrator.pop("seed", None)
    return {"integrator": integrator, "spec": provenance.get("spec"), "scheme": provenance.get("scheme")}


def msd(trajectories: Sequence[Trajectory], tag: int = 0) -> MsdSeries:
    """
    Replica-averaged squared displacement |X^tag(t_k) - X^tag(0)|^2.

    All trajectories must share their time grid and model provenance.
    """
    if not trajectories:
        raise DomainError("msd needs at least one trajectory")
    reference = trajectories[0]
    for traj in trajectories[1:]:
        if not np.array_equal(traj.times, reference.times):
            raise DomainError("Trajectories do not share a time grid")
        if _comparable(traj.provenance) != _comparable(reference.provenance):
            raise DomainError("Trajectories do not share their model provenance")
    per_replica = np.array([
        np.sum((traj.tagged_path(tag) - traj.tagged_path(tag)[0]) ** 2, axis=1) for traj in trajectories
    ])
    return MsdSeries(reference.times, per_replica.mean(axis=0), len(trajectories), tag, per_replica)


class RescaledPath:
    """
    The path t -> eps * X(t / eps^2) of one tagged particle.

    Stored as the unscaled base path and the accumulated eps, so composing
    two rescalings gives the same floats as one rescaling by the product.
    """

    def __init__(self, base_times: np.ndarray, base_positions: np.ndarray, epsilon: float):
        self.base_times = base_times
        self.base_positions = base_positions
        self.epsilon = epsilon

    @property
    def times(self) -> np.ndarray:
        return self.base_times * self.epsilon ** 2

    @property
    def positions(self) -> np.ndarray:
        return self.epsilon * self.base_positions

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def at(self, grid: Sequence[float]) -> np.ndarray:
        """Values on a requested time grid, linearly interpolated"""
        grid = np.asarray(grid, dtype=float)
        source = grid / self.epsilon ** 2
        if np.any(source > self.base_times[-1]) or np.any(grid < 0):
            raise DomainError(f"Requested times exceed the rescaled horizon {self.horizon:.4g}")
        columns = [np.interp(source, self.base_times, self.base_positions[:, k])
                   for k in range(self.base_positions.shape[1])]
        return self.epsilon * np.column_stack(columns)


def rescale(path: Union[Trajectory, RescaledPath], epsilon: float, tag: int = 0) -> RescaledPath:
    """
    Diffusive rescaling eps * X^tag_{t/eps^2}, eps in (0, 1].

    A RescaledPath input is rescaled again (tag is then ignored).
    """
    if not 0 < epsilon <= 1:
        raise DomainError(f"epsilon must lie in (0, 1], got {epsilon}")
    if isinstance(path, RescaledPath):
        return RescaledPath(path.base_times, path.base_positions, path.epsilon * epsilon)
    return RescaledPath(path.times, path.tagged_path(tag), epsilon)


@dataclass
class ExponentEstimate:
    exponent: float
    half_width: float
    window: Tuple[float, float]
    points: int

    def to_dict(self) -> Dict:
        return {"exponent": self.exponent, "half_width": self.half_width,
                "window": list(self.window), "points": self.points}


def _slope(log_t: np.ndarray, values: np.ndarray) -> float:
    return float(np.polyfit(log_t, np.log(values), 1)[0])


def msd_exponent(series: MsdSeries, window: Tuple[float, float], resamples: int = BOOTSTRAP_RESAMPLES,
                 seed: int = 0) -> ExponentEstimate:
    """
    Least-squares slope of log msd against log t over a time window.

    The confidence half-width is half the central 95% range of the slope over
    bootstrap resamples of the replicas; it is 0 without per-replica data.
    """
    t_lo, t_hi = window
    mask = (series.times >= t_lo) & (series.times <= t_hi) & (series.times > 0)
    if mask.sum() < 5:
        raise DomainError(f"Window {window} holds {int(mask.sum())} grid points, need at least 5")
    values = series.msd[mask]
    if np.any(values <= 0):
        raise DomainError("MSD must be positive inside the fit window")
    log_t = np.log(series.times[mask])
    exponent = _slope(log_t, values)

    half_width = 0.0
    data = series.per_replica
    if data is not None and data.shape[0] >= 2 and resamples > 0:
        rng = np.random.default_rng(seed)
        slopes = []
        for _ in range(resamples):
            pick = rng.integers(0, data.shape[0], data.shape[0])
            sample = data[pick][:, mask].mean(axis=0)
            if np.all(sample > 0):
                slopes.append(_slope(log_t, sample))
        if slopes:
            lo, hi = np.percentile(slopes, [2.5, 97.5])
            half_width = float(hi - lo) / 2.0
    return ExponentEstimate(exponent, half_width, (float(t_lo), float(t_hi)), int(mask.sum()))


def msd_ratio_trend(series: MsdSeries) -> Dict:
    """
    msd(t)/t at the decade boundaries 10^k inside the grid, and whether it
    decreases monotonically across them.
    """
    positive = series.times[series.times > 0]
    if positive.size == 0:
        raise DomainError("MSD series has no positive times")
    k_lo = math.ceil(math.log10(positive[0]))
    k_hi = math.floor(math.log10(positive[-1]))
    points = []
    for k in range(k_lo, k_hi + 1):
        idx = int(np.argmin(np.abs(series.times - 10.0 ** k)))
        points.append((float(series.times[idx]), float(series.msd[idx] / series.times[idx])))
    ratios = [r for _, r in points]
    monotone = len(ratios) >= 2 and all(b < a for a, b in zip(ratios, ratios[1:]))
    return {"boundaries": points, "monotone_decreasing": monotone}


class VarianceSeries:
    """
    Mean and variance of disk counts across configurations, per radius.
    """

    def __init__(self, radii, count_mean, count_variance, replicas: int, beyond_bulk=None):
        self.radii = np.asarray(radii, dtype=float)
        self.count_mean = np.asarray(count_mean, dtype=float)
        self.count_variance = np.asarray(count_variance, dtype=float)
        self.replicas = int(replicas)
        self.beyond_bulk = (np.zeros(self.radii.size, dtype=bool) if beyond_bulk is None
                            else np.asarray(beyond_bulk, dtype=bool))
        if np.any(np.diff(self.radii) <= 0):
            raise DomainError("radii must be strictly increasing")
        if np.any(self.count_variance < 0):
            raise DomainError("variances must be non-negative")

    def variance_per_area(self) -> np.ndarray:
        return self.count_variance / (math.pi * self.radii ** 2)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "radius": self.radii,
            "count_mean": self.count_mean,
            "count_variance": self.count_variance,
            "variance_per_area": self.variance_per_area(),
            "beyond_bulk": self.beyond_bulk,
            "replicas": self.replicas,
        })

    def write(self, path: str, fmt: str = "csv", provenance: Optional[Dict] = None) -> None:
        write_table(self.to_frame(), path, fmt, provenance)


def number_variance(configs: Sequence[Configuration], radii: Sequence[float],
                    center: Sequence[float] = (0.0, 0.0),
                    bulk_radius: Optional[float] = None) -> VarianceSeries:
    """
    Count statistics of disks of radius R about a fixed centre.

    Args:
        configs: i.i.d. samples
        radii: strictly increasing disk radii
        center: disk centre
        bulk_radius: radii beyond it are flagged; defaults to 0.5 sqrt(N), the
            bulk of a Ginibre droplet of N points

    Returns:
        VarianceSeries over the radii
    """
    if len(configs) < 2:
        raise DomainError("number_variance needs at least two configurations")
    radii = np.asarray(radii, dtype=float)
    center = np.asarray(center, dtype=float)[: configs[0].dim]
    counts = np.empty((len(configs), radii.size))
    for r, config in enumerate(configs):
        dist = np.sort(np.linalg.norm(config.points - center, axis=1))
        counts[r] = np.searchsorted(dist, radii, side="left")

    if bulk_radius is None:
        bulk_radius = 0.5 * math.sqrt(min(c.n for c in configs))
    beyond = radii > bulk_radius
    if beyond.any():
        logger.warning("Radii %s exceed the bulk guard %.3g", radii[beyond].tolist(), bulk_radius)
    return VarianceSeries(radii, counts.mean(axis=0), counts.var(axis=0, ddof=1), len(configs), beyond)


def index_of_dispersion(series: VarianceSeries) -> List[Dict]:
    """
    Variance/mean per radius with its Poisson standard error sqrt(2/(R-1)).
    """
    sigma = math.sqrt(2.0 / (series.replicas - 1))
    rows = []
    for radius, mean, var in zip(series.radii, series.count_mean, series.count_variance):
        dispersion = var / mean if mean > 0 else math.nan
        rows.append({
            "radius": float(radius),
            "dispersion": float(dispersion),
            "sigma": sigma,
            "within_3sigma": bool(abs(dispersion - 1.0) <= 3.0 * sigma),
        })
    return rows


def _sum_sq(points: np.ndarray) -> float:
    return float(np.sum(points ** 2))


def _spectrum(points: np.ndarray) -> np.ndarray:
    # d = 1: the positions themselves; d = 2: the moduli
    if points.shape[1] == 1:
        return points[:, 0]
    return np.linalg.norm(points, axis=1)


def stationarity_report(trajectories: Sequence[Trajectory]) -> Dict:
    """
    Compare the first and last frames of equilibrium-started runs.

    Returns:
        Ensemble means of sum |x_i|^2, their relative change, and KS
        statistics between pooled t=0 and t=T samples of sum |x_i|^2 and of
        the single-particle spectrum
    """
    if not trajectories:
        raise DomainError("stationarity_report needs at least one trajectory")
    start = np.array([_sum_sq(t.positions[0]) for t in trajectories])
    end = np.array([_sum_sq(t.positions[-1]) for t in trajectories])
    spectrum_start = np.concatenate([_spectrum(t.positions[0]) for t in trajectories])
    spectrum_end = np.concatenate([_spectrum(t.positions[-1]) for t in trajectories])
    mean_start = float(start.mean())
    return {
        "replicas": len(trajectories),
        "t_start": float(trajectories[0].times[0]),
        "t_end": float(trajectories[0].times[-1]),
        "sum_sq_mean_start": mean_start,
        "sum_sq_mean_end": float(end.mean()),
        "relative_change": float(abs(end.mean() - mean_start) / mean_start) if mean_start else math.nan,
        "ks_sum_sq": float(ks_2samp(start, end).statistic),
        "ks_spectrum": float(ks_2samp(spectrum_start, spectrum_end).statistic),
    }


@dataclass
class ModelArm:
    """One model of a matched comparison; scheme None disables interactions"""
    name: str
    spec: PotentialSpec
    scheme: Optional[TruncationScheme]

    def to_dict(self) -> Dict:
        return {"name": self.name, "spec": self.spec.to_dict(),
                "scheme": self.scheme.to_dict() if self.scheme is not None else None}


@dataclass
class Harness:
    """
    Shared settings of matched MSD experiments.

    Every arm starts from the same Ginibre samples (replica k seeded with
    replica_seed(seed, k)) and uses the same integrator settings.
    """
    n: int = 128
    replicas: int = 32
    integrator: IntegratorConfig = field(default_factory=lambda: IntegratorConfig(
        dt=1e-4, steps=10000, record_every=10))
    window: Optional[Tuple[float, float]] = None
    seed: int = 0
    threads: int = 1
    tag: int = 0

    def fit_window(self) -> Tuple[float, float]:
        """Last decade of the run unless given explicitly"""
        if self.window is not None:
            return self.window
        horizon = self.integrator.steps * self.integrator.dt
        return (horizon / 10.0, horizon)

    def initial_configurations(self) -> List[Configuration]:
        return [sample_ginibre_eigenvalues(self.n, replica_seed(self.seed, k)) for k in range(self.replicas)]

    def to_dict(self) -> Dict:
        return {"n": self.n, "replicas": self.replicas, "integrator": self.integrator.to_dict(),
                "window": list(self.fit_window()), "seed": self.seed, "tag": self.tag}


def ginibre_arm(radius: float = math.inf) -> ModelArm:
    """Confined Ginibre dynamics: origin-centred sum plus the restoring term"""
    return ModelArm("ginibre", PotentialSpec.ginibre(), TruncationScheme.origin(radius))


def ruelle_arm(gamma: float = 5.0, radius: float = math.inf) -> ModelArm:
    """Short-range Riesz control, unconfined, particle-centred sum"""
    return ModelArm("ruelle", PotentialSpec(gamma=gamma, dim=2, beta=2.0), TruncationScheme.particle(radius))


def free_arm() -> ModelArm:
    return ModelArm("free", PotentialSpec(gamma=2.0, dim=2, beta=2.0, free=FreePotential.none()), None)


def run_arm(arm: ModelArm, harness: Harness, initials: Optional[List[Configuration]] = None) -> Dict:
    """
    Simulate one arm and summarise its tagged-particle MSD.
    """
    if initials is None:
        initials = harness.initial_configurations()
    logger.info("Running arm %s: %d replicas of N=%d", arm.name, len(initials), harness.n)
    trajectories = simulate_replicas(initials, arm.spec, arm.scheme, harness.integrator, harness.threads)
    series = msd(trajectories, harness.tag)
    estimate = msd_exponent(series, harness.fit_window(), seed=harness.seed)
    return {
        "arm": arm.to_dict(),
        "series": series,
        "exponent": estimate,
        "ratio_trend": msd_ratio_trend(series),
        "integrator_stats": [t.stats for t in trajectories],
    }


def self_diffusion_compare(arm_a: ModelArm, arm_b: ModelArm, harness: Harness,
                           include_free_control: bool = True) -> Dict:
    """
    Matched MSD experiments for a Coulomb arm and a diffusive control.

    Returns:
        Report dictionary with the exponent, half-width and msd(t)/t trend of
        every arm, and the exponent excess of arm_b over arm_a
    """
    initials = harness.initial_configurations()
    arms = [arm_a, arm_b] + ([free_arm()] if include_free_control else [])
    results = {arm.name: run_arm(arm, harness, initials) for arm in arms}
    report = {"harness": harness.to_dict(), "arms": {}}
    for name, result in results.items():
        report["arms"][name] = {
            "model": result["arm"],
            "exponent": result["exponent"].to_dict(),
            "ratio_trend": result["ratio_trend"],
            "tamed_fraction": float(np.mean([s["tamed_fraction"] for s in result["integrator_stats"]])),
            "rejected_fraction": float(np.mean([s["rejected_fraction"] for s in result["integrator_stats"]])),
        }
    report["exponent_excess"] = (results[arm_b.name]["exponent"].exponent
                                 - results[arm_a.name]["exponent"].exponent)
    report["series"] = {name: result["series"] for name, result in results.items()}
    return report
