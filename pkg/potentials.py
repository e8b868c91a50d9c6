"""
Riesz/Coulomb pair potentials and free potentials.

Psi_gamma is normalised so that grad Psi_gamma(x) = -x/|x|^gamma for every
gamma > 0; at gamma = 2 it is the logarithmic potential -log|x|. The
fundamental solution G_gamma of -Laplacian/2 on R^gamma differs from Psi_gamma
by the factor sigma_gamma/2, sigma_gamma being the surface volume of the unit
sphere in R^gamma.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Union

import numpy as np
from scipy.special import gamma as gamma_function

from utils import DomainError, SingularityError

ArrayLike = Union[float, np.ndarray, list, tuple]


class Regime(Enum):
    STRICT_COULOMB = "StrictCoulomb"
    COULOMB = "Coulomb"
    RUELLE = "RuelleRegime"
    SUB_RIESZ = "SubRiesz"


@dataclass(frozen=True)
class FreePotential:
    """
    Free (one-body) potential Phi.

    kind is "none" or "harmonic"; the harmonic shape is Phi(x) = c|x|^2/2.
    """
    kind: str = "none"
    coefficient: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "harmonic"):
            raise DomainError(f"Unknown free potential kind: {self.kind!r}")
        if self.kind == "harmonic" and not self.coefficient >= 0:
            raise DomainError(f"Harmonic coefficient must be >= 0, got {self.coefficient}")

    @classmethod
    def none(cls) -> "FreePotential":
        return cls("none", 0.0)

    @classmethod
    def harmonic(cls, coefficient: float = 1.0) -> "FreePotential":
        return cls("harmonic", float(coefficient))

    def value(self, x: ArrayLike) -> float:
        if self.kind == "none":
            return 0.0
        x = _as_point(x)
        return 0.5 * self.coefficient * float(np.dot(x, x))

    def values(self, points: np.ndarray) -> np.ndarray:
        """Phi evaluated row-wise on an (N, d) array"""
        points = np.asarray(points, dtype=float)
        if self.kind == "none":
            return np.zeros(points.shape[0])
        return 0.5 * self.coefficient * np.sum(points * points, axis=1)

    def gradient(self, x: ArrayLike) -> np.ndarray:
        x = _as_point(x)
        if self.kind == "none":
            return np.zeros_like(x)
        return self.coefficient * x

    def gradients(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if self.kind == "none":
            return np.zeros_like(points)
        return self.coefficient * points

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "coefficient": self.coefficient}

    @classmethod
    def from_dict(cls, data: Dict) -> "FreePotential":
        return cls(data.get("kind", "none"), float(data.get("coefficient", 0.0)))


@dataclass(frozen=True)
class PotentialSpec:
    """
    Model parameters of an interacting Brownian system.

    Args:
        gamma: Riesz exponent, any positive real
        dim: spatial dimension, 1 or 2
        beta: inverse temperature
        free: free potential Phi
    """
    gamma: float
    dim: int
    beta: float
    free: FreePotential = field(default_factory=FreePotential.none)

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        if not self.beta > 0:
            raise DomainError(f"beta must be positive, got {self.beta}")
        if self.dim not in (1, 2):
            raise DomainError(f"dim must be 1 or 2, got {self.dim}")

    @classmethod
    def ginibre(cls) -> "PotentialSpec":
        return cls(gamma=2.0, dim=2, beta=2.0, free=FreePotential.harmonic(1.0))

    @classmethod
    def dyson(cls, beta: float = 2.0) -> "PotentialSpec":
        return cls(gamma=2.0, dim=1, beta=beta, free=FreePotential.harmonic(1.0))

    @property
    def regime(self) -> Regime:
        return classify(self)

    @property
    def is_coulomb(self) -> bool:
        return self.dim <= self.gamma <= self.dim + 2

    def to_dict(self) -> Dict:
        return {
            "gamma": self.gamma,
            "dim": self.dim,
            "beta": self.beta,
            "free": self.free.to_dict(),
            "regime": classify(self).value,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PotentialSpec":
        return cls(
            gamma=float(data["gamma"]),
            dim=int(data["dim"]),
            beta=float(data["beta"]),
            free=FreePotential.from_dict(data.get("free", {})),
        )


def _as_point(x: ArrayLike) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


def _norm(x: np.ndarray) -> float:
    r = float(np.linalg.norm(x))
    if r == 0.0:
        raise SingularityError("Potential evaluated at the origin")
    return r


def surface_volume(gamma: float) -> float:
    """
    Surface volume of the unit sphere in R^gamma: 2 pi^(gamma/2) / Gamma(gamma/2).

    Non-integer gamma is allowed.
    """
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    return 2.0 * math.pi ** (gamma / 2.0) / float(gamma_function(gamma / 2.0))


def fundamental_solution(gamma: float, x: ArrayLike) -> float:
    """Fundamental solution G_gamma of -Laplacian/2 on R^gamma, evaluated at x"""
    x = _as_point(x)
    r = _norm(x)
    scale = 2.0 / surface_volume(gamma)
    if gamma == 2:
        return -scale * math.log(r)
    return scale * r ** (2.0 - gamma) / (gamma - 2.0)


def grad_fundamental_solution(gamma: float, x: ArrayLike) -> np.ndarray:
    x = _as_point(x)
    r = _norm(x)
    return -(2.0 / surface_volume(gamma)) * x / r ** gamma


def psi(gamma: float, x: ArrayLike) -> float:
    """
    Riesz pair potential Psi_gamma(x) = (sigma_gamma / 2) G_gamma(x).

    The sigma factors cancel: |x|^(2-gamma)/(gamma-2), or -log|x| at gamma = 2.
    """
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    x = _as_point(x)
    r = _norm(x)
    if gamma == 2:
        return -math.log(r)
    return r ** (2.0 - gamma) / (gamma - 2.0)


def grad_psi(gamma: float, x: ArrayLike) -> np.ndarray:
    """grad Psi_gamma(x) = -x/|x|^gamma"""
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    x = _as_point(x)
    r = _norm(x)
    return -x / r ** gamma


def psi_of_distance(gamma: float, r: np.ndarray) -> np.ndarray:
    """Vectorised Psi_gamma as a function of |x|; r must be positive"""
    r = np.asarray(r, dtype=float)
    if gamma == 2:
        return -np.log(r)
    return r ** (2.0 - gamma) / (gamma - 2.0)


def pair_forces(gamma: float, diffs: np.ndarray, dists: np.ndarray) -> np.ndarray:
    """
    -grad Psi_gamma for a stack of difference vectors.

    diffs has shape (..., d), dists the matching (...) norms; zero distances
    must be masked by the caller.
    """
    return diffs / (dists ** gamma)[..., np.newaxis]


def classify(spec: PotentialSpec) -> Regime:
    """
    Classify (gamma, d) into the interaction regimes.

    StrictCoulomb takes precedence over Coulomb when gamma = d; use
    spec.is_coulomb for the inclusive Coulomb range d <= gamma <= d + 2.
    """
    g, d = spec.gamma, spec.dim
    if g == d:
        return Regime.STRICT_COULOMB
    if g < d:
        return Regime.SUB_RIESZ
    if g <= d + 2:
        return Regime.COULOMB
    return Regime.RUELLE
