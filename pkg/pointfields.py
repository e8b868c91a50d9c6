"""
Finite-N surrogates of the equilibrium point fields.

This module provides labelled point configurations and the samplers used to
produce them: single-particle Metropolis for the log-gas density
e^{-beta [sum Phi + sum Psi_gamma]}, exact matrix-model samplers for the two
solvable instances (Ginibre for (beta, gamma, d) = (2, 2, 2) and Dyson/GUE for
d = 1, gamma = 2, beta = 2, both with Phi = Harmonic(1)), Poisson controls
and a deterministic lattice.
"""

import json
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import pdist

from potentials import PotentialSpec, psi_of_distance
from utils import DomainError, InitializationError, dumps_record

logger = logging.getLogger(__name__)


class Configuration:
    """
    A finite labelled point set in R^d standing in for s = sum_i delta_{s_i}.

    points[p] is the position of the particle stored at index p;
    label_order[i] is the index of the particle carrying label i. Instances
    are immutable: the arrays are flagged read-only.
    """

    def __init__(self, points, label_order=None, metadata: Optional[Dict] = None,
                 dim: Optional[int] = None, validate: bool = True):
        points = np.array(points, dtype=float)
        if points.ndim == 1:
            if dim is None and points.size == 0:
                raise DomainError("Empty configuration needs an explicit dim")
            points = points.reshape(-1, dim or 1)
        if points.ndim != 2 or points.shape[1] not in (1, 2):
            raise DomainError(f"points must have shape (N, d) with d in {{1, 2}}, got {points.shape}")
        if dim is not None and points.shape[1] != dim:
            raise DomainError(f"points have dimension {points.shape[1]}, expected {dim}")
        self.points = points
        self.dim = points.shape[1]

        if label_order is None:
            label_order = modulus_order(points)
        label_order = np.array(label_order, dtype=np.int64)
        if validate:
            _check_permutation(label_order, points.shape[0])
            _check_distinct(points)
        self.label_order = label_order
        self.metadata = dict(metadata or {})

        self.points.setflags(write=False)
        self.label_order.setflags(write=False)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.n

    def labeled_points(self) -> np.ndarray:
        """Positions ordered by label"""
        return self.points[self.label_order]

    def position(self, label: int) -> np.ndarray:
        return self.points[self.label_order[label]]

    def index_of(self, label: int) -> int:
        return int(self.label_order[label])

    def with_points(self, points, validate: bool = False) -> "Configuration":
        """Same labels and metadata, new positions (index-aligned)"""
        return Configuration(points, self.label_order, self.metadata, dim=self.dim, validate=validate)

    def min_separation(self) -> float:
        if self.n < 2:
            return math.inf
        return float(pdist(self.points).min())

    def to_dict(self) -> Dict:
        return {
            "dim": self.dim,
            "n": self.n,
            "points": self.points,
            "label_order": self.label_order,
            "seed": self.metadata.get("seed"),
            "sampler": self.metadata.get("sampler", {}),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Configuration":
        metadata = {"seed": data.get("seed"), "sampler": data.get("sampler", {})}
        points = np.array(data["points"], dtype=float).reshape(int(data["n"]), int(data["dim"]))
        return cls(points, data["label_order"], metadata, dim=int(data["dim"]))

    def to_jsonl(self) -> str:
        return dumps_record(self.to_dict())

    @classmethod
    def from_jsonl(cls, line: str) -> "Configuration":
        return cls.from_dict(json.loads(line))

    def __repr__(self) -> str:
        return f"Configuration(dim={self.dim}, n={self.n})"


def _check_permutation(label_order: np.ndarray, n: int) -> None:
    if label_order.shape != (n,) or not np.array_equal(np.sort(label_order), np.arange(n)):
        raise DomainError("label_order is not a permutation of 0..N-1")


def _check_distinct(points: np.ndarray) -> None:
    if points.shape[0] >= 2 and not pdist(points).min() > 0:
        raise DomainError("Configuration contains coincident points")


def modulus_order(points: np.ndarray) -> np.ndarray:
    """
    Indices sorted by increasing |x|, ties broken by lexicographic coordinates.
    """
    points = np.asarray(points, dtype=float)
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    radii = np.linalg.norm(points, axis=1)
    # lexsort uses the last key as primary
    keys = tuple(points[:, k] for k in reversed(range(points.shape[1]))) + (radii,)
    return np.lexsort(keys).astype(np.int64)


def relabel(config: Configuration) -> Configuration:
    """Assign labels by increasing distance from the origin"""
    return Configuration(config.points, modulus_order(config.points), config.metadata,
                         dim=config.dim, validate=False)


class LogGasDensity:
    """
    Unnormalised log-gas weight e^{-energy} on N points.

    energy(s) = beta [ sum_i Phi(s_i) + sum_{i<j} Psi_gamma(s_i - s_j) ]
    """

    def __init__(self, spec: PotentialSpec, n: int):
        if n < 0:
            raise DomainError(f"Particle count must be non-negative, got {n}")
        self.spec = spec
        self.n = int(n)

    def energy(self, points) -> float:
        points = np.asarray(points, dtype=float).reshape(-1, self.spec.dim)
        phi_terms = self.spec.free.values(points)
        if points.shape[0] < 2:
            return self.spec.beta * math.fsum(phi_terms)
        dists = pdist(points)
        if not dists.min() > 0:
            return math.inf
        # shell order; fsum makes the total independent of point order
        pair_terms = psi_of_distance(self.spec.gamma, np.sort(dists))
        return self.spec.beta * (math.fsum(phi_terms) + math.fsum(pair_terms))

    def delta_energy(self, points: np.ndarray, k: int, new_position) -> float:
        """
        Energy change when particle k moves to new_position. O(N).
        """
        old = points[k]
        new = np.asarray(new_position, dtype=float)
        others = np.delete(points, k, axis=0)
        d_phi = self.spec.free.value(new) - self.spec.free.value(old)
        if others.shape[0] == 0:
            return self.spec.beta * d_phi
        new_dists = np.linalg.norm(others - new, axis=1)
        if not new_dists.min() > 0:
            return math.inf
        old_dists = np.linalg.norm(others - old, axis=1)
        d_pair = np.sum(psi_of_distance(self.spec.gamma, new_dists) - psi_of_distance(self.spec.gamma, old_dists))
        return self.spec.beta * (d_phi + float(d_pair))

    def neg_gradient(self, points) -> np.ndarray:
        """-grad energy for every particle, by direct pairwise evaluation"""
        points = np.asarray(points, dtype=float).reshape(-1, self.spec.dim)
        diffs = points[:, np.newaxis, :] - points[np.newaxis, :, :]
        dists = np.linalg.norm(diffs, axis=2)
        np.fill_diagonal(dists, np.inf)
        forces = np.sum(diffs / (dists ** self.spec.gamma)[..., np.newaxis], axis=1)
        return self.spec.beta * (forces - self.spec.free.gradients(points))

    def to_dict(self) -> Dict:
        return {"spec": self.spec.to_dict(), "n": self.n}


def default_burn_in(n: int) -> int:
    return 100 * n


def default_proposal_scale(points: np.ndarray) -> float:
    """
    0.5 / sqrt(intensity), the intensity being estimated as N over the
    volume spanned by the initial configuration.
    """
    n, dim = points.shape
    reach = float(np.max(np.linalg.norm(points, axis=1))) if n else 1.0
    reach = max(reach, 1e-12)
    volume = math.pi * reach ** 2 if dim == 2 else 2.0 * reach
    return 0.5 / math.sqrt(n / volume)


def _initial_spread(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    # Uniform in the Ginibre droplet (radius sqrt n) or the GUE support [-sqrt 2n, sqrt 2n]
    if dim == 2:
        r = math.sqrt(n) * np.sqrt(rng.random(n))
        theta = 2.0 * math.pi * rng.random(n)
        return np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return rng.uniform(-math.sqrt(2.0 * n), math.sqrt(2.0 * n), size=(n, 1))


class LogGasMetropolis:
    """
    Single-particle Gaussian-proposal Metropolis chain for a LogGasDensity.

    One sweep proposes a move for every particle in index order. Moves that
    collapse two points have infinite energy and are rejected.
    """

    def __init__(self, density: LogGasDensity, seed: int, proposal_scale: Optional[float] = None,
                 initial: Optional[Union[Configuration, np.ndarray]] = None):
        if density.n < 2:
            raise DomainError(f"Log-gas sampling needs n >= 2, got {density.n}")
        self.density = density
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        dim = density.spec.dim

        if initial is None:
            points = _initial_spread(density.n, dim, self.rng)
        elif isinstance(initial, Configuration):
            points = np.array(initial.points, dtype=float)
        else:
            points = np.array(initial, dtype=float).reshape(-1, dim)
        if points.shape != (density.n, dim):
            raise InitializationError(f"Initial state has shape {points.shape}, expected {(density.n, dim)}")
        self.points = points
        self.energy = density.energy(points)
        if not math.isfinite(self.energy):
            raise InitializationError("Initial configuration has non-finite energy")

        if proposal_scale is None:
            proposal_scale = default_proposal_scale(points)
        if proposal_scale < 0:
            raise DomainError(f"proposal_scale must be >= 0, got {proposal_scale}")
        self.proposal_scale = float(proposal_scale)
        self.accepted = 0
        self.proposed = 0

    def sweep(self) -> None:
        n, dim = self.points.shape
        steps = self.rng.standard_normal((n, dim)) * self.proposal_scale
        log_u = np.log(self.rng.random(n))
        for k in range(n):
            proposal = self.points[k] + steps[k]
            delta = self.density.delta_energy(self.points, k, proposal)
            self.proposed += 1
            if delta <= 0 or log_u[k] < -delta:
                self.points[k] = proposal
                self.energy += delta
                self.accepted += 1

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0

    def run(self, sweeps: int, burn_in: int = 0,
            observe: Optional[Callable[[np.ndarray], float]] = None) -> np.ndarray:
        """
        Advance burn_in + sweeps sweeps; returns observe(points) after each
        post-burn-in sweep (empty when observe is None).
        """
        for _ in range(burn_in):
            self.sweep()
        trace = []
        for _ in range(sweeps):
            self.sweep()
            if observe is not None:
                trace.append(observe(self.points))
        logger.debug("Metropolis chain seed=%d acceptance=%.3f", self.seed, self.acceptance_rate)
        return np.asarray(trace, dtype=float)

    def configuration(self) -> Configuration:
        metadata = {
            "seed": self.seed,
            "sampler": {
                "method": "metropolis",
                "proposal_scale": self.proposal_scale,
                "acceptance_rate": self.acceptance_rate,
                "density": self.density.to_dict(),
            },
        }
        return Configuration(self.points.copy(), metadata=metadata)


def sample_loggas_mcmc(density: LogGasDensity, sweeps: int, burn_in: Optional[int] = None,
                       proposal_scale: Optional[float] = None, seed: int = 0,
                       initial: Optional[Configuration] = None) -> Configuration:
    """
    Approximate sample of the log-gas density by Metropolis.

    Args:
        density: target density
        sweeps: post-burn-in sweeps, at least 1
        burn_in: defaults to 100 N sweeps
        proposal_scale: defaults to 0.5/sqrt(intensity) of the initial state
        seed: RNG seed; the chain is deterministic given the seed
        initial: starting configuration, drawn uniformly over the droplet when omitted

    Returns:
        The final state as a Configuration labelled by modulus
    """
    if sweeps < 1:
        raise DomainError(f"sweeps must be >= 1, got {sweeps}")
    if burn_in is None:
        burn_in = default_burn_in(density.n)
    chain = LogGasMetropolis(density, seed, proposal_scale, initial)
    chain.run(sweeps, burn_in)
    config = chain.configuration()
    config.metadata["sampler"].update({"sweeps": sweeps, "burn_in": burn_in})
    return config


def trace_loggas_mcmc(density: LogGasDensity, sweeps: int, observe: Callable[[np.ndarray], float],
                      burn_in: Optional[int] = None, proposal_scale: Optional[float] = None,
                      seed: int = 0, initial: Optional[Configuration] = None) -> np.ndarray:
    """Per-sweep trace of an observable along a Metropolis chain"""
    if burn_in is None:
        burn_in = default_burn_in(density.n)
    chain = LogGasMetropolis(density, seed, proposal_scale, initial)
    return chain.run(sweeps, burn_in, observe)


def _complex_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    # E|g|^2 = 1
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def sample_ginibre_eigenvalues(n: int, seed: int) -> Configuration:
    """
    Exact sample of the N-point Ginibre ensemble.

    Eigenvalues of an n x n matrix with i.i.d. standard complex Gaussian
    entries have density proportional to prod|z_i - z_j|^2 e^{-sum |z_i|^2},
    the log-gas with (beta, gamma, d) = (2, 2, 2) and Phi = Harmonic(1).
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    eigenvalues = np.linalg.eigvals(_complex_gaussian(rng, (n, n)))
    points = np.column_stack([eigenvalues.real, eigenvalues.imag])
    metadata = {"seed": int(seed), "sampler": {"method": "ginibre-eigenvalues", "n": n}}
    return Configuration(points, metadata=metadata)


def sample_gue_eigenvalues(n: int, seed: int) -> Configuration:
    """
    Exact sample of the N-point Dyson log-gas at beta = 2.

    Eigenvalues of H = (A + A^*)/2, A standard complex Gaussian, have density
    proportional to prod|x_i - x_j|^2 e^{-sum x_i^2}; E sum x_i^2 = n^2/2.
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    a = _complex_gaussian(rng, (n, n))
    eigenvalues = np.linalg.eigvalsh((a + a.conj().T) / 2.0)
    metadata = {"seed": int(seed), "sampler": {"method": "gue-eigenvalues", "n": n}}
    return Configuration(eigenvalues.reshape(n, 1), metadata=metadata)


def sample_ginibre_2x2(samples: int, seed: int) -> np.ndarray:
    """
    Eigenvalues of many 2 x 2 Ginibre matrices via the quadratic formula.

    Returns an array of shape (samples, 2) of complex eigenvalues.
    """
    rng = np.random.default_rng(seed)
    g = _complex_gaussian(rng, (samples, 4))
    a, b, c, d = g[:, 0], g[:, 1], g[:, 2], g[:, 3]
    trace = a + d
    disc = np.sqrt(trace * trace - 4.0 * (a * d - b * c))
    return np.column_stack([(trace + disc) / 2.0, (trace - disc) / 2.0])


class Window:
    """
    Observation window for Poisson and lattice samples.

    shape is "disk" (radius about center, d = 2), "box" (lower/upper corners,
    d = 1 or 2).
    """

    def __init__(self, shape: str, radius: float = 0.0, lower: Sequence[float] = (),
                 upper: Sequence[float] = (), center: Sequence[float] = (0.0, 0.0)):
        self.shape = shape
        self.radius = float(radius)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.center = np.asarray(center, dtype=float)
        if shape == "disk":
            if not self.radius > 0:
                raise DomainError(f"Disk window needs a positive radius, got {radius}")
            self.dim = 2
        elif shape == "box":
            if self.lower.shape != self.upper.shape or self.lower.size not in (1, 2):
                raise DomainError("Box window needs matching 1-d or 2-d corners")
            if not np.all(self.upper > self.lower):
                raise DomainError("Box window has zero volume")
            self.dim = self.lower.size
        else:
            raise DomainError(f"Unknown window shape: {shape!r}")

    @classmethod
    def disk(cls, radius: float, center: Sequence[float] = (0.0, 0.0)) -> "Window":
        return cls("disk", radius=radius, center=center)

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> "Window":
        return cls("box", lower=lower, upper=upper)

    @property
    def volume(self) -> float:
        if self.shape == "disk":
            return math.pi * self.radius ** 2
        return float(np.prod(self.upper - self.lower))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, self.dim)
        if self.shape == "disk":
            return np.linalg.norm(points - self.center, axis=1) < self.radius
        return np.all((points >= self.lower) & (points < self.upper), axis=1)

    def uniform(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if self.shape == "disk":
            r = self.radius * np.sqrt(rng.random(count))
            theta = 2.0 * math.pi * rng.random(count)
            return self.center + np.column_stack([r * np.cos(theta), r * np.sin(theta)])
        return self.lower + (self.upper - self.lower) * rng.random((count, self.dim))

    def to_dict(self) -> Dict:
        if self.shape == "disk":
            return {"shape": "disk", "radius": self.radius, "center": self.center.tolist()}
        return {"shape": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "Window":
        if data.get("shape") == "disk":
            return cls.disk(data["radius"], data.get("center", (0.0, 0.0)))
        return cls.box(data["lower"], data["upper"])


def sample_poisson(intensity: float, window: Window, seed: int) -> Configuration:
    """
    Homogeneous Poisson sample: Poisson(intensity * volume) points, i.i.d.
    uniform in the window. N = 0 is a legal outcome.
    """
    if not intensity > 0:
        raise DomainError(f"intensity must be positive, got {intensity}")
    rng = np.random.default_rng(seed)
    count = int(rng.poisson(intensity * window.volume))
    points = window.uniform(rng, count).reshape(count, window.dim)
    metadata = {
        "seed": int(seed),
        "sampler": {"method": "poisson", "intensity": intensity, "window": window.to_dict()},
    }
    return Configuration(points, metadata=metadata, dim=window.dim)


def square_lattice(spacing: float, window: Window, shift: Optional[Sequence[float]] = None) -> Configuration:
    """Points of spacing * Z^d (+ shift) that fall inside the window"""
    if not spacing > 0:
        raise DomainError(f"spacing must be positive, got {spacing}")
    shift = np.zeros(window.dim) if shift is None else np.asarray(shift, dtype=float)
    if window.shape == "disk":
        lo = window.center - window.radius
        hi = window.center + window.radius
    else:
        lo, hi = window.lower, window.upper
    axes = [np.arange(math.floor((lo[k] - shift[k]) / spacing), math.ceil((hi[k] - shift[k]) / spacing) + 1)
            * spacing + shift[k] for k in range(window.dim)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, window.dim)
    points = grid[window.contains(grid)]
    metadata = {"seed": None, "sampler": {"method": "lattice", "spacing": spacing, "window": window.to_dict()}}
    return Configuration(points, metadata=metadata, dim=window.dim)


def ginibre_radii_check(config: Configuration) -> Dict:
    """
    Squared-radius statistics of a Ginibre sample.

    Returns:
        Dictionary with n, sum of |z_i|^2, the sorted squared radii and the
        largest squared radius
    """
    if config.dim != 2:
        raise DomainError(f"Ginibre statistics need d = 2, got d = {config.dim}")
    if config.n == 0:
        raise DomainError("Ginibre statistics of an empty configuration")
    sq = np.sort(np.sum(config.points ** 2, axis=1))
    return {
        "n": config.n,
        "sum_sq_radius": float(np.sum(sq)),
        "sq_radii": sq,
        "max_sq_radius": float(sq[-1]),
    }


def save_configurations(path: str, configs: List[Configuration]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for config in configs:
            f.write(config.to_jsonl())
            f.write("\n")


def load_configurations(path: str) -> List[Configuration]:
    with open(path, "r", encoding="utf-8") as f:
        return [Configuration.from_jsonl(line) for line in f if line.strip()]
