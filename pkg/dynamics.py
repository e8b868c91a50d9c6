"""
Finite-N integration of the interacting Brownian systems.

Tamed Euler-Maruyama with a simultaneous update: every drift is evaluated on
the pre-step state, capped at the taming magnitude M, and a step that would
bring two particles closer than min_separation is redrawn with fresh noise.
Each particle label owns a counter-based Philox noise stream derived from the
integrator seed, which makes runs deterministic and exchangeable.
"""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial.distance import pdist

from drift import TruncationScheme, drift_field
from pointfields import Configuration
from potentials import PotentialSpec
from utils import CODE_VERSION, DomainError, StepFailure, dumps_record, replica_seed, stream_generator

logger = logging.getLogger(__name__)

TRAJECTORY_FORMAT = "coulomb-rigidity-trajectory"
TRAJECTORY_FORMAT_VERSION = 1
STABILITY_LIMIT = 0.1


@dataclass(frozen=True)
class IntegratorConfig:
    """
    Time stepping parameters.

    Args:
        dt: time step
        steps: number of steps
        taming_cap: largest drift magnitude M applied to one particle
        min_separation: steps bringing a pair closer than this are redrawn
        record_every: keep every record_every-th state; a trailing remainder is dropped
        seed: master seed of the noise streams
        max_retries: redraws allowed per step before giving up
    """
    dt: float = 1e-4
    steps: int = 1000
    taming_cap: float = 50.0
    min_separation: float = 1e-4
    record_every: int = 10
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError(f"dt must be positive, got {self.dt}")
        if self.steps < 0:
            raise DomainError(f"steps must be >= 0, got {self.steps}")
        if not self.taming_cap > 0:
            raise DomainError(f"taming_cap must be positive, got {self.taming_cap}")
        if self.min_separation < 0:
            raise DomainError(f"min_separation must be >= 0, got {self.min_separation}")
        if self.record_every < 1:
            raise DomainError(f"record_every must be >= 1, got {self.record_every}")

    @property
    def frame_count(self) -> int:
        return self.steps // self.record_every + 1

    @property
    def is_stable(self) -> bool:
        return self.dt * self.taming_cap <= STABILITY_LIMIT

    def with_seed(self, seed: int) -> "IntegratorConfig":
        return dataclasses.replace(self, seed=int(seed))

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "IntegratorConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


class NoiseStreams:
    """
    Independent standard Gaussian streams, one per stream id.

    Draws are buffered in blocks so that the per-particle generators are
    touched once per block rather than once per step.
    """

    def __init__(self, seed: int, stream_ids: Sequence[int], dim: int, block: int = 256):
        self.seed = int(seed)
        self.stream_ids = np.asarray(stream_ids, dtype=np.int64)
        self.dim = dim
        self.block = block
        self._generators = [stream_generator(self.seed, sid) for sid in self.stream_ids]
        self._buffer = np.empty((len(self._generators), 0, dim))
        self._cursor = 0

    def _refill(self) -> None:
        if not self._generators:
            self._buffer = np.empty((0, self.block, self.dim))
        else:
            self._buffer = np.stack([g.standard_normal((self.block, self.dim)) for g in self._generators])
        self._cursor = 0

    def draw(self) -> np.ndarray:
        """One (N, d) array of standard normals"""
        if self._cursor >= self._buffer.shape[1]:
            self._refill()
        xi = self._buffer[:, self._cursor, :]
        self._cursor += 1
        return xi


def default_stream_ids(config: Configuration) -> np.ndarray:
    """Stream id of each stored particle: its label"""
    ids = np.empty(config.n, dtype=np.int64)
    ids[config.label_order] = np.arange(config.n)
    return ids


def tame(drifts: np.ndarray, cap: float):
    """
    Scale each row to magnitude at most cap.

    Returns:
        The tamed drifts and a boolean mask of the rows that were capped
    """
    norms = np.linalg.norm(drifts, axis=1)
    capped = norms > cap
    factors = np.ones_like(norms)
    factors[capped] = cap / norms[capped]
    return drifts * factors[:, np.newaxis], capped


class Integrator:
    """
    Tamed Euler-Maruyama stepper bound to one model and one noise source.
    """

    def __init__(self, spec: PotentialSpec, scheme: Optional[TruncationScheme], icfg: IntegratorConfig,
                 noise: NoiseStreams):
        self.spec = spec
        self.scheme = scheme
        self.icfg = icfg
        self.noise = noise
        self.steps_taken = 0
        self.tamed_steps = 0
        self.tamed_particle_steps = 0
        self.rejected_attempts = 0
        if not icfg.is_stable:
            logger.warning("dt * taming_cap = %.3g exceeds the stability guard %.3g",
                           icfg.dt * icfg.taming_cap, STABILITY_LIMIT)

    def step(self, points: np.ndarray, labels: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Advance the positions by one time step.

        Args:
            points: (N, d) pre-step positions
            labels: label of each stored particle, used only in error reports

        Returns:
            The (N, d) post-step positions
        """
        dt = self.icfg.dt
        drifts, capped = tame(drift_field(points, self.spec, self.scheme), self.icfg.taming_cap)
        if capped.any():
            self.tamed_steps += 1
            self.tamed_particle_steps += int(capped.sum())
        deterministic = points + drifts * dt
        root_dt = math.sqrt(dt)

        pair, closest = None, math.nan
        for attempt in range(self.icfg.max_retries + 1):
            proposal = deterministic + root_dt * self.noise.draw()
            if proposal.shape[0] < 2:
                break
            separations = pdist(proposal)
            k = int(np.argmin(separations))
            closest = float(separations[k])
            if closest >= self.icfg.min_separation and closest > 0:
                break
            self.rejected_attempts += 1
            i, j = np.triu_indices(proposal.shape[0], k=1)
            pair = (int(i[k]), int(j[k])) if labels is None else (int(labels[i[k]]), int(labels[j[k]]))
            logger.debug("Step rejected (attempt %d): pair %s at distance %.3g", attempt, pair, closest)
        else:
            raise StepFailure(f"No admissible step after {self.icfg.max_retries} retries; "
                              f"pair {pair} at distance {closest:.3g}", pair=pair, distance=closest)
        self.steps_taken += 1
        return proposal

    def stats(self) -> Dict:
        steps = max(self.steps_taken, 1)
        return {
            "steps": self.steps_taken,
            "tamed_steps": self.tamed_steps,
            "tamed_particle_steps": self.tamed_particle_steps,
            "rejected_attempts": self.rejected_attempts,
            "tamed_fraction": self.tamed_steps / steps,
            "rejected_fraction": self.rejected_attempts / steps,
        }


def step(state: Configuration, spec: PotentialSpec, scheme: Optional[TruncationScheme],
         icfg: IntegratorConfig, noise: Optional[NoiseStreams] = None) -> Configuration:
    """
    One tamed Euler-Maruyama step of a configuration.

    Without an explicit noise source a fresh one is derived from icfg.seed,
    so repeated calls reuse the same draws; simulate() keeps one source per run.
    """
    if noise is None:
        noise = NoiseStreams(icfg.seed, default_stream_ids(state), state.dim)
    labels = default_stream_ids(state)
    new_points = Integrator(spec, scheme, icfg, noise).step(state.points, labels)
    return state.with_points(new_points)


class Trajectory:
    """
    Recorded positions of a labelled particle system.

    positions[k, p] is the position at times[k] of the particle stored at
    index p; labels are fixed by label_order for the whole run.
    """

    def __init__(self, times: np.ndarray, positions: np.ndarray, label_order: np.ndarray,
                 provenance: Dict, stats: Optional[Dict] = None):
        self.times = np.asarray(times, dtype=float)
        self.positions = np.asarray(positions, dtype=float)
        self.label_order = np.asarray(label_order, dtype=np.int64)
        self.provenance = provenance
        self.stats = dict(stats or {})

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    def __len__(self) -> int:
        return self.times.size

    def frame(self, k: int) -> Configuration:
        return Configuration(self.positions[k], self.label_order, {"time": float(self.times[k])},
                             dim=self.dim, validate=False)

    @property
    def frames(self) -> List[Configuration]:
        return [self.frame(k) for k in range(len(self))]

    def tagged_path(self, label: int) -> np.ndarray:
        """(K, d) positions of one label over time"""
        return self.positions[:, self.label_order[label], :]

    def header(self) -> Dict:
        return {
            "format": TRAJECTORY_FORMAT,
            "format_version": TRAJECTORY_FORMAT_VERSION,
            "n": self.n,
            "dim": self.dim,
            "frames": len(self),
            "label_order": self.label_order,
            "provenance": self.provenance,
            "stats": self.stats,
        }

    def save(self, path: str) -> None:
        """
        JSON lines: one header record, then one {"t", "points"} record per frame.
        """
        with open(path, "w", encoding="utf-8") as f:
            f.write(dumps_record(self.header()))
            f.write("\n")
            for t, pts in zip(self.times, self.positions):
                f.write(dumps_record({"t": t, "points": pts}))
                f.write("\n")

    @classmethod
    def load(cls, path: str) -> "Trajectory":
        with open(path, "r", encoding="utf-8") as f:
            header = json.loads(f.readline())
            if header.get("format") != TRAJECTORY_FORMAT:
                raise DomainError(f"{path} is not a trajectory file")
            times, frames = [], []
            for line in f:
                if line.strip():
                    record = json.loads(line)
                    times.append(record["t"])
                    frames.append(record["points"])
        positions = np.array(frames, dtype=float).reshape(len(frames), header["n"], header["dim"])
        return cls(np.array(times, dtype=float), positions, header["label_order"],
                   header["provenance"], header.get("stats"))


def read_header(path: str) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline())
    if header.get("format") != TRAJECTORY_FORMAT:
        raise DomainError(f"{path} is not a trajectory file")
    return header


def simulate(initial: Configuration, spec: PotentialSpec, scheme: Optional[TruncationScheme],
             icfg: IntegratorConfig, stream_ids: Optional[Sequence[int]] = None) -> Trajectory:
    """
    Integrate from an initial configuration.

    Args:
        initial: starting configuration, labels are kept for the whole run
        spec: potential parameters
        scheme: truncation of the interaction sum; None runs without interactions
        icfg: integrator settings
        stream_ids: noise stream of each stored particle, by default its label

    Returns:
        Trajectory with floor(steps / record_every) + 1 frames
    """
    if initial.dim != spec.dim:
        raise DomainError(f"Configuration dimension {initial.dim} does not match d = {spec.dim}")
    labels = default_stream_ids(initial)
    if stream_ids is None:
        stream_ids = labels
    integrator = Integrator(spec, scheme, icfg, NoiseStreams(icfg.seed, stream_ids, initial.dim))

    positions = np.empty((icfg.frame_count, initial.n, initial.dim))
    positions[0] = initial.points
    points = np.array(initial.points, dtype=float)
    for k in range(1, icfg.steps + 1):
        try:
            points = integrator.step(points, labels)
        except StepFailure as exc:
            exc.step_index = k
            logger.error("Integration failed at step %d: %s", k, exc)
            raise
        if k % icfg.record_every == 0:
            positions[k // icfg.record_every] = points

    times = np.arange(icfg.frame_count) * (icfg.record_every * icfg.dt)
    provenance = {
        "integrator": icfg.to_dict(),
        "spec": spec.to_dict(),
        "scheme": scheme.to_dict() if scheme is not None else None,
        "initial": {"seed": initial.metadata.get("seed"), "sampler": initial.metadata.get("sampler", {})},
        "code_version": CODE_VERSION,
    }
    stats = integrator.stats()
    if stats["tamed_fraction"] > 0.01 or stats["rejected_fraction"] > 0.001:
        logger.warning("Taming fraction %.4f, rejection fraction %.4f", stats["tamed_fraction"],
                       stats["rejected_fraction"])
    return Trajectory(times, positions, initial.label_order, provenance, stats)


def simulate_replicas(initials: Sequence[Configuration], spec: PotentialSpec,
                      scheme: Optional[TruncationScheme], icfg: IntegratorConfig,
                      threads: int = 1) -> List[Trajectory]:
    """
    One trajectory per initial configuration; replica k is seeded with
    replica_seed(icfg.seed, k). Output order does not depend on threads.
    """
    configs = [icfg.with_seed(replica_seed(icfg.seed, k)) for k in range(len(initials))]
    if threads <= 1:
        return [simulate(init, spec, scheme, c) for init, c in zip(initials, configs)]
    return Parallel(n_jobs=threads)(
        delayed(simulate)(init, spec, scheme, c) for init, c in zip(initials, configs)
    )
