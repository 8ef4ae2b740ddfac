import numpy as np
import pytest

from models.cone_membership import pinched_membership
from models.curvature_algebra import SymmetricForm, kn_product
from models.pinching_builder import (
    PinchingFunction,
    build,
    default_sigmas,
    epsilon_search,
    pinched_set_invariance,
)
from utils.errors import BuildError, PreconditionError


def test_default_sequence_halves_the_distance_to_one():
    sigmas = default_sigmas(1.5, depth=3)
    assert sigmas == pytest.approx([1.25, 1.125, 1.0625])


def test_f_is_linear_for_small_s(pinching_n5):
    f = pinching_n5
    assert f(0.0) == 0.0
    assert f.small_s_threshold() == pytest.approx(10.0)
    for s in (0.5, 3.0, 10.0):
        assert f(s) == pytest.approx(s / 2.0)
    assert f(11.0) < 5.5


def test_f_is_concave_with_slope_tending_to_one_over_n_minus_two(pinching_n5):
    f = pinching_n5
    s = np.geomspace(1e-3, 1e6, 500)
    values = f(s)
    slopes = np.diff(values) / np.diff(s)
    assert np.all(np.diff(slopes) <= 1e-9)
    assert f(1e6) / 1e6 == pytest.approx(1.0 / 3.0, abs=0.01)
    assert f.validation["asymptote_error"] <= 0.01


def test_first_breakpoint(pinching_n5):
    s, value, left, right = pinching_n5.breakpoints()[0]
    assert s == pytest.approx(10.0)
    assert value == pytest.approx(5.0)
    assert (left, right) == (0, 1)


def test_serialized_function_evaluates_identically(pinching_n5):
    again = PinchingFunction.from_dict(pinching_n5.to_dict())
    s = np.linspace(0.0, 500.0, 101)
    np.testing.assert_array_equal(again(s), pinching_n5(s))


def test_build_preconditions():
    with pytest.raises(PreconditionError):
        build(2.0, 0.05, 5)
    with pytest.raises(PreconditionError):
        build(1.5, 0.0, 5)
    with pytest.raises(PreconditionError):
        build(1.5, 0.05, 5, sigmas=[1.25, 1.3])
    with pytest.raises(PreconditionError):
        build(1.5, 0.05, 5)(-1.0)


def test_short_sequence_misses_the_asymptote():
    with pytest.raises(BuildError) as excinfo:
        build(1.5, 0.05, 5, sigmas=[1.25, 1.125])
    assert excinfo.value.which == "asymptote"


def test_measure_reports_each_invariant_without_raising():
    checks, points = PinchingFunction(n=5, sigma0=1.5, theta=0.05, sigmas=[1.25, 1.125]).measure()
    assert checks["concavity"]["passed"]
    assert checks["small_s"]["passed"]
    assert not checks["asymptote"]["passed"]
    assert checks["asymptote"]["value"] > 0.01
    assert points["asymptote_point"] >= 1e6


def test_sampled_member_is_pinched(pinching_n5, restarts):
    R = pinching_n5.sample_member(seed=2, restarts=restarts)
    assert pinched_membership(R, pinching_n5, restarts=restarts).member


def test_round_neck_tensor_is_pinched(pinching_n5, restarts):
    H = SymmetricForm.diag([-0.5] + [0.5] * 4)
    report = pinched_membership(kn_product(H, SymmetricForm.identity(5)), pinching_n5, restarts=restarts)
    assert report.member
    assert report.details["active_term"] >= 0


def test_pinched_membership_checks_dimension(pinching_n5):
    with pytest.raises(PreconditionError):
        pinched_membership(kn_product(SymmetricForm.identity(6), SymmetricForm.identity(6)), pinching_n5)


def test_epsilon_search_preconditions():
    with pytest.raises(PreconditionError):
        epsilon_search(1.6, 1.4, 0.05, 1.0, 5)
    with pytest.raises(PreconditionError):
        epsilon_search(1.2, 1.4, 0.0, 1.0, 5)
    with pytest.raises(PreconditionError):
        epsilon_search(1.2, 1.4, 0.05, -1.0, 5)


@pytest.mark.slow
def test_small_epsilon_search():
    evidence = epsilon_search(1.3, 1.4, 0.05, 1.0, 5, samples=4, sigma_points=2, boundary_samples=2,
                              ladder=(1.0, 10.0, 100.0), restarts=4)
    data = evidence.to_dict()
    assert data["epsilon"] >= 0.0
    assert len(data["ladder"]) >= 1
    if evidence.certified:
        assert 0.0 < evidence.epsilon <= 1.3 / 2.0


@pytest.mark.slow
def test_small_pinched_invariance(pinching_n5):
    report = pinched_set_invariance(pinching_n5, samples=2, seed=4, horizon=3.0, restarts=4)
    assert report.passed
