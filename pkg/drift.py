"""
Truncated drift sums of the interacting Brownian systems.

The interaction sum converges only conditionally, so every sum here is
accumulated sequentially (np.cumsum) in increasing distance from the
truncation centre: the particle position x for the particle-centred scheme,
the origin for the origin-centred one. drift_at and drift_field share that
order and give bit-identical values.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from pointfields import Configuration
from potentials import FreePotential, PotentialSpec, pair_forces
from utils import DomainError, SingularityError

logger = logging.getLogger(__name__)

CENTERED_AT_PARTICLE = "particle"
CENTERED_AT_ORIGIN = "origin"


@dataclass(frozen=True)
class TruncationScheme:
    """
    Which pairs enter a truncated drift sum.

    kind "particle": {j : |x - s_j| < radius}; kind "origin": {j : |s_j| < radius},
    to be paired with a restoring free potential.
    """
    kind: str = CENTERED_AT_PARTICLE
    radius: float = math.inf

    def __post_init__(self):
        if self.kind not in (CENTERED_AT_PARTICLE, CENTERED_AT_ORIGIN):
            raise DomainError(f"Unknown truncation scheme: {self.kind!r}")
        if not self.radius > 0:
            raise DomainError(f"Truncation radius must be positive, got {self.radius}")

    @classmethod
    def particle(cls, radius: float = math.inf) -> "TruncationScheme":
        return cls(CENTERED_AT_PARTICLE, float(radius))

    @classmethod
    def origin(cls, radius: float = math.inf) -> "TruncationScheme":
        return cls(CENTERED_AT_ORIGIN, float(radius))

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "radius": self.radius}

    @classmethod
    def from_dict(cls, data: Dict) -> "TruncationScheme":
        return cls(data.get("kind", CENTERED_AT_PARTICLE), float(data.get("radius", math.inf)))


class DriftResult:
    """
    A truncated drift value with its running partial sums.

    partials[k] is the drift restricted to terms whose centre distance is
    below radii[k]; the last radius is the scheme radius, so value == partials[-1].
    """

    def __init__(self, x: np.ndarray, scheme: TruncationScheme, radii: np.ndarray,
                 partials: np.ndarray, terms_used: int):
        self.x = x
        self.scheme = scheme
        self.radii = radii
        self.partials = partials
        self.terms_used = terms_used

    @property
    def value(self) -> np.ndarray:
        return self.partials[-1]

    @property
    def shell_partials(self) -> List:
        return list(zip(self.radii.tolist(), self.partials))

    def increments(self) -> np.ndarray:
        """|partial(r_{k+1}) - partial(r_k)| for consecutive schedule radii"""
        return np.linalg.norm(np.diff(self.partials, axis=0), axis=1)

    def to_dict(self) -> Dict:
        return {
            "x": self.x,
            "scheme": self.scheme.to_dict(),
            "radii": self.radii,
            "partials": self.partials,
            "value": self.value,
            "terms_used": self.terms_used,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DriftResult":
        radii = np.asarray(data["radii"], dtype=float)
        partials = np.asarray(data["partials"], dtype=float).reshape(radii.size, -1)
        return cls(np.asarray(data["x"], dtype=float), TruncationScheme.from_dict(data["scheme"]), radii,
                   partials, int(data["terms_used"]))


def _schedule(scheme: TruncationScheme, radius_schedule: Optional[Sequence[float]]) -> np.ndarray:
    if radius_schedule is None or len(radius_schedule) == 0:
        return np.array([scheme.radius])
    radii = np.asarray(radius_schedule, dtype=float)
    if np.any(np.diff(radii) <= 0) or not radii[0] > 0:
        raise DomainError("radius_schedule must be positive and strictly increasing")
    if radii[-1] > scheme.radius:
        raise DomainError(f"Schedule radius {radii[-1]} exceeds the scheme radius {scheme.radius}")
    if radii[-1] < scheme.radius:
        radii = np.append(radii, scheme.radius)
    return radii


def drift_at(x, config: Configuration, spec: PotentialSpec, scheme: TruncationScheme,
             exclude: Optional[int] = None,
             radius_schedule: Optional[Sequence[float]] = None) -> DriftResult:
    """
    Truncated drift b(x) = (beta/2) [ -grad Phi(x) + sum_j (x - s_j)/|x - s_j|^gamma ].

    Args:
        x: evaluation point
        config: the other particles
        spec: potential parameters
        scheme: truncation centre and radius
        exclude: label whose term is left out (the particle sitting at x)
        radius_schedule: increasing radii at which running partials are kept

    Returns:
        DriftResult with the partial sums and the final value
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (spec.dim,) or config.dim != spec.dim:
        raise DomainError(f"Point of shape {x.shape} and configuration of dimension {config.dim} "
                          f"do not match d = {spec.dim}")
    radii = _schedule(scheme, radius_schedule)
    points = config.points

    diffs = x - points
    dists = np.linalg.norm(diffs, axis=1)
    if scheme.kind == CENTERED_AT_PARTICLE:
        centre_dists = dists
    else:
        centre_dists = np.linalg.norm(points, axis=1)

    included = centre_dists < scheme.radius
    if exclude is not None:
        included[config.index_of(exclude)] = False
    if np.any(dists[included] == 0):
        raise SingularityError(f"Drift evaluated on top of an included point at {x.tolist()}")

    idx = np.flatnonzero(included)
    order = idx[np.argsort(centre_dists[idx], kind="stable")]
    running = np.cumsum(pair_forces(spec.gamma, diffs[order], dists[order]), axis=0)
    counts = np.searchsorted(centre_dists[order], radii, side="left")

    sums = np.zeros((radii.size, spec.dim))
    filled = counts > 0
    sums[filled] = running[counts[filled] - 1]
    partials = (spec.beta / 2.0) * (-spec.free.gradient(x) + sums)
    return DriftResult(x, scheme, radii, partials, int(order.size))


def log_derivative(x, config: Configuration, spec: PotentialSpec, scheme: TruncationScheme,
                   exclude: Optional[int] = None) -> np.ndarray:
    """
    Logarithmic derivative -beta { grad Phi(x) + sum grad Psi_gamma(x - s_i) }
    of the log-gas, truncated by the scheme; exactly twice the drift.
    """
    return 2.0 * drift_at(x, config, spec, scheme, exclude).value


def drift_field(points: np.ndarray, spec: PotentialSpec, scheme: Optional[TruncationScheme]) -> np.ndarray:
    """
    Drift of every particle at once, each excluding its own term.

    Values are bit-identical to drift_at(points[i], ..., exclude=label of i).
    scheme None switches interactions off (free potential only).
    """
    points = np.asarray(points, dtype=float)
    n, dim = points.shape
    if scheme is None or n < 2:
        return (spec.beta / 2.0) * (-spec.free.gradients(points) + np.zeros_like(points))

    diffs = points[:, np.newaxis, :] - points[np.newaxis, :, :]
    dists = np.linalg.norm(diffs, axis=2)
    np.fill_diagonal(dists, math.inf)

    if scheme.kind == CENTERED_AT_PARTICLE:
        included = dists < scheme.radius
        order = np.argsort(dists, axis=1, kind="stable")
    else:
        moduli = np.linalg.norm(points, axis=1)
        included = np.broadcast_to(moduli < scheme.radius, (n, n)).copy()
        np.fill_diagonal(included, False)
        order = np.broadcast_to(np.argsort(moduli, kind="stable"), (n, n))

    if np.any(dists[included] == 0):
        i, j = np.argwhere(included & (dists == 0))[0]
        raise SingularityError(f"Particles {i} and {j} coincide")

    safe = np.where(included, dists, 1.0)
    forces = pair_forces(spec.gamma, diffs, safe)
    forces[~included] = 0.0
    ordered = np.take_along_axis(forces, order[:, :, np.newaxis], axis=1)
    sums = np.cumsum(ordered, axis=1)[:, -1, :]
    return (spec.beta / 2.0) * (-spec.free.gradients(points) + sums)


def drift_identity_gap(config: Configuration, label: int, r: float, beta: float = 2.0,
                       coefficient: float = 1.0) -> float:
    """
    Distance between the two truncated Ginibre drifts of one particle.

    A(r) uses the particle-centred sum without free potential; B(r) the
    origin-centred sum with the restoring term -coefficient * x_i. Both carry
    the factor beta/2, so at beta = 2 they are the plain sums.
    """
    if config.dim != 2:
        raise DomainError(f"The drift identity is stated for d = 2, got d = {config.dim}")
    x_i = config.position(label)
    if not np.linalg.norm(x_i) < r:
        raise DomainError(f"Particle {label} at |x| = {np.linalg.norm(x_i):.4g} is not inside radius {r}")
    a_spec = PotentialSpec(gamma=2.0, dim=2, beta=beta)
    b_spec = PotentialSpec(gamma=2.0, dim=2, beta=beta, free=FreePotential.harmonic(coefficient))
    a = drift_at(x_i, config, a_spec, TruncationScheme.particle(r), exclude=label).value
    b = drift_at(x_i, config, b_spec, TruncationScheme.origin(r), exclude=label).value
    return float(np.linalg.norm(a - b))


def drift_identity_profile(config: Configuration, label: int, radii: Sequence[float],
                           beta: float = 2.0) -> np.ndarray:
    """Gap of drift_identity_gap at each radius"""
    return np.array([drift_identity_gap(config, label, r, beta) for r in radii])
