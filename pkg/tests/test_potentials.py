import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from potentials import (FreePotential, PotentialSpec, Regime, classify, fundamental_solution,
                        grad_fundamental_solution, grad_psi, pair_forces, psi, psi_of_distance, surface_volume)
from utils import DomainError, SingularityError

GAMMAS = [1.0, 1.5, 2.0, 3.0, 4.0]
RADII = [0.5, 1.0, 2.0]
DIRECTIONS = [2.0 * math.pi * k / 8 for k in range(8)]


@pytest.mark.parametrize("gamma, expected", [(1.0, 2.0), (2.0, 2.0 * math.pi), (3.0, 4.0 * math.pi)])
def test_surface_volume_known_values(gamma, expected):
    assert surface_volume(gamma) == pytest.approx(expected, rel=1e-12)


def test_surface_volume_rejects_non_positive_gamma():
    with pytest.raises(DomainError):
        surface_volume(0.0)
    with pytest.raises(DomainError):
        surface_volume(-1.0)


def test_fundamental_solution_examples():
    assert fundamental_solution(2.0, [1.0, 0.0]) == pytest.approx(0.0, abs=1e-15)
    assert fundamental_solution(3.0, [1.0, 0.0]) == pytest.approx(1.0 / (2.0 * math.pi), rel=1e-12)
    assert fundamental_solution(1.0, [2.0]) == pytest.approx(-2.0, rel=1e-12)


def test_fundamental_solution_singular_at_origin():
    with pytest.raises(SingularityError):
        fundamental_solution(2.0, [0.0, 0.0])


def test_psi_examples():
    assert psi(2.0, [math.e, 0.0]) == pytest.approx(-1.0, rel=1e-12)
    assert psi(3.0, [0.0, 1.0]) == pytest.approx(1.0, rel=1e-12)
    assert psi(4.0, [2.0, 0.0]) == pytest.approx(0.125, rel=1e-12)


def test_grad_psi_examples():
    np.testing.assert_allclose(grad_psi(2.0, [1.0, 0.0]), [-1.0, 0.0], rtol=1e-12)
    np.testing.assert_allclose(grad_psi(2.0, [0.0, 2.0]), [0.0, -0.5], rtol=1e-12)
    np.testing.assert_allclose(grad_psi(3.0, [3.0, 4.0]), [-3.0 / 125.0, -4.0 / 125.0], rtol=1e-12)


def test_singularity_at_origin():
    with pytest.raises(SingularityError):
        psi(2.0, [0.0, 0.0])
    with pytest.raises(SingularityError):
        grad_psi(3.0, [0.0])
    # singularity errors are domain errors too
    with pytest.raises(DomainError):
        psi(1.5, [0.0, 0.0])


@pytest.mark.parametrize("gamma", GAMMAS)
@pytest.mark.parametrize("radius", RADII)
def test_grad_psi_matches_central_difference(gamma, radius):
    h = 1e-5
    for theta in DIRECTIONS:
        x = radius * np.array([math.cos(theta), math.sin(theta)])
        numeric = np.array([
            (psi(gamma, x + h * e) - psi(gamma, x - h * e)) / (2.0 * h) for e in np.eye(2)
        ])
        exact = grad_psi(gamma, x)
        assert np.linalg.norm(numeric - exact) <= 1e-6 * np.linalg.norm(exact)


@given(
    gamma=st.floats(min_value=0.5, max_value=6.0),
    x=st.lists(st.floats(min_value=-10, max_value=10), min_size=2, max_size=2).filter(
        lambda v: math.hypot(*v) > 1e-3),
)
def test_grad_psi_is_odd(gamma, x):
    x = np.array(x)
    np.testing.assert_array_equal(grad_psi(gamma, -x), -grad_psi(gamma, x))


@given(
    gamma=st.floats(min_value=0.5, max_value=6.0),
    r=st.floats(min_value=0.1, max_value=10.0),
    theta=st.floats(min_value=0.0, max_value=2 * math.pi),
)
def test_psi_is_rotation_invariant(gamma, r, theta):
    x = np.array([r, 0.0])
    y = r * np.array([math.cos(theta), math.sin(theta)])
    assert psi(gamma, y) == pytest.approx(psi(gamma, x), rel=1e-12, abs=1e-12)
    assert np.linalg.norm(grad_psi(gamma, y)) == pytest.approx(np.linalg.norm(grad_psi(gamma, x)),
                                                                rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("gamma", GAMMAS + [2.5, 5.0])
def test_psi_is_scaled_fundamental_solution(gamma):
    for radius in RADII:
        x = [radius * 0.6, radius * 0.8]
        scaled = surface_volume(gamma) / 2.0 * fundamental_solution(gamma, x)
        assert psi(gamma, x) == pytest.approx(scaled, abs=1e-12, rel=1e-12)
        np.testing.assert_allclose(surface_volume(gamma) / 2.0 * grad_fundamental_solution(gamma, x),
                                   grad_psi(gamma, x), rtol=1e-12)


def test_psi_of_distance_agrees_with_psi():
    r = np.array([0.5, 1.0, 3.0])
    for gamma in GAMMAS:
        expected = [psi(gamma, [v, 0.0]) for v in r]
        np.testing.assert_allclose(psi_of_distance(gamma, r), expected, rtol=1e-14)


def test_pair_forces_are_antisymmetric():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 5, 2))
    diffs = a - b
    dists = np.linalg.norm(diffs, axis=1)
    np.testing.assert_array_equal(pair_forces(2.5, -diffs, dists), -pair_forces(2.5, diffs, dists))


@pytest.mark.parametrize("gamma, dim, regime", [
    (2.0, 2, Regime.STRICT_COULOMB),
    (1.0, 1, Regime.STRICT_COULOMB),
    (2.0, 1, Regime.COULOMB),
    (3.0, 1, Regime.COULOMB),
    (4.0, 2, Regime.COULOMB),
    (5.0, 2, Regime.RUELLE),
    (3.5, 1, Regime.RUELLE),
    (1.5, 2, Regime.SUB_RIESZ),
    (0.5, 1, Regime.SUB_RIESZ),
])
def test_classify(gamma, dim, regime):
    spec = PotentialSpec(gamma=gamma, dim=dim, beta=2.0)
    assert classify(spec) is regime
    assert spec.regime is regime


def test_ginibre_is_strict_coulomb_and_in_coulomb_range():
    spec = PotentialSpec.ginibre()
    assert spec.regime is Regime.STRICT_COULOMB
    assert spec.is_coulomb
    assert not PotentialSpec(gamma=5.0, dim=2, beta=2.0).is_coulomb


@pytest.mark.parametrize("kwargs", [
    {"gamma": 0.0, "dim": 2, "beta": 2.0},
    {"gamma": 2.0, "dim": 3, "beta": 2.0},
    {"gamma": 2.0, "dim": 2, "beta": 0.0},
])
def test_invalid_specs_are_rejected(kwargs):
    with pytest.raises(DomainError):
        PotentialSpec(**kwargs)


def test_free_potential_gradients():
    x = np.array([0.3, -1.7])
    np.testing.assert_array_equal(FreePotential.harmonic(2.5).gradient(x), 2.5 * x)
    np.testing.assert_array_equal(FreePotential.none().gradient(x), np.zeros(2))
    assert FreePotential.harmonic(1.0).value(x) == pytest.approx(0.5 * float(x @ x))
    with pytest.raises(DomainError):
        FreePotential("quartic", 1.0)
    with pytest.raises(DomainError):
        FreePotential.harmonic(-1.0)


@settings(max_examples=25)
@given(gamma=st.floats(min_value=0.1, max_value=8.0), beta=st.floats(min_value=0.1, max_value=8.0),
       dim=st.sampled_from([1, 2]), c=st.floats(min_value=0.0, max_value=4.0))
def test_spec_dict_round_trip(gamma, beta, dim, c):
    spec = PotentialSpec(gamma=gamma, dim=dim, beta=beta, free=FreePotential.harmonic(c))
    data = spec.to_dict()
    assert data["regime"] == classify(spec).value
    assert PotentialSpec.from_dict(data) == spec
