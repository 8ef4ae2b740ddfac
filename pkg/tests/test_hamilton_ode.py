import numpy as np
import pytest

from models.cone_membership import ConeSpec
from models.curvature_algebra import SymmetricForm, kn_product, scalar, sphere_tensor, weyl_part
from models.hamilton_ode import (
    OdeState,
    analytic_theta_bar,
    cylinder_closed_form,
    cylinder_line_deviation,
    cylinder_tensor,
    integrate,
    invariance_probe,
    rhs_coupled,
    sample_seeds,
    sphere_blowup_time,
    sphere_closed_form,
    step2_case1,
    step2_case2,
    step2_expression,
    step3_consistency,
    step4_derivative,
    step4_direct,
    step5_residual,
    theta_bar_estimate,
    transversality_probe,
    validate_step4,
)
from models.sampling import CurvatureSampler, random_symmetric
from utils.errors import GaugeViolation, PreconditionError


def _gauge_pair(n, seed, rng):
    S = weyl_part(CurvatureSampler(n, seed=seed).sample("generic"))
    S = S * (0.1 / S.scale()) + sphere_tensor(n) * 0.2
    return S, random_symmetric(rng, n, scale=0.1)


def test_sphere_follows_closed_form():
    n, r0 = 5, 0.1
    record, state = integrate(OdeState.full(sphere_tensor(n) * r0), t_end=0.5, rtol=1e-10)
    assert record.stop_reason == "t_end"
    assert state.time == pytest.approx(0.5)
    r = scalar(state.tensor()) / (2.0 * n * (n - 1))
    assert r == pytest.approx(sphere_closed_form(r0, n, 0.5), rel=1e-6)
    assert sphere_blowup_time(r0, n) == pytest.approx(0.625)


def test_cylinder_stays_on_its_line():
    n, c0 = 5, 0.1
    _, state = integrate(OdeState.full(cylinder_tensor(n) * c0), t_end=0.5, rtol=1e-10)
    c, deviation = cylinder_line_deviation(state.tensor())
    assert deviation < 1e-10
    assert c == pytest.approx(cylinder_closed_form(c0, n, 0.5), rel=1e-6)


def test_scal_factor_stop():
    record, _ = integrate(OdeState.full(sphere_tensor(5) * 0.1), scal_factor=10.0)
    assert record.stop_reason == "scal_factor"
    assert record.scal[-1] >= 10.0 * record.scal[0]
    frame = record.to_frame()
    assert list(frame.columns) == ["t", "scal", "slack", "dt", "rho"]
    assert frame["t"].is_monotonic_increasing


def test_integrate_needs_a_stop_and_positive_scal():
    with pytest.raises(PreconditionError):
        integrate(OdeState.full(sphere_tensor(5)))
    with pytest.raises(PreconditionError):
        integrate(OdeState.full(sphere_tensor(5) * -1.0), scal_factor=2.0)


def test_normalized_flow_keeps_scal(rng):
    R = CurvatureSampler(5, seed=12).sample("pic2_interior")
    record, state = integrate(OdeState.full(R, normalized=True), t_end=0.2, rtol=1e-10)
    assert scalar(state.tensor()) == pytest.approx(scalar(R), rel=1e-6)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 1.5])
def test_coupled_system_reconstructs_q(sigma, rng):
    S, H = _gauge_pair(5, 21, rng)
    assert step5_residual(S, H, sigma) < 1e-10


def test_coupled_integration_matches_full(rng):
    S, H = _gauge_pair(5, 22, rng)
    R = S + kn_product(H, SymmetricForm.identity(5))
    _, coupled = integrate(OdeState.coupled(S, H, 1.5), t_end=0.05, rtol=1e-11)
    _, full = integrate(OdeState.full(R), t_end=0.05, rtol=1e-11)
    assert coupled.tensor().max_error(full.tensor()) < 1e-8


def test_coupled_system_checks_its_gauge(rng):
    S = CurvatureSampler(5, seed=4).sample("generic")
    with pytest.raises(GaugeViolation):
        rhs_coupled(S, random_symmetric(rng, 5), 1.5)
    with pytest.raises(PreconditionError):
        OdeState.coupled(sphere_tensor(4), SymmetricForm.identity(4), 2.0)


def test_step2_cases_agree_and_are_nonnegative(rng):
    for _ in range(50):
        a = rng.exponential(size=6)
        i, j = rng.choice(6, size=2, replace=False)
        for sigma in (0.3, 1.0, 4.0 / 3.0, 1.7, 2.0):
            value = step2_expression(a, sigma, i, j)
            scale = max(1.0, a.sum() ** 2)
            assert value >= -1e-12 * scale
            assert step2_case1(a, sigma, i, j) == pytest.approx(value, abs=1e-10 * scale)
            assert step2_case2(a, sigma, i, j) == pytest.approx(value, abs=1e-10 * scale)


def test_step2_rejects_negative_eigenvalues():
    with pytest.raises(PreconditionError):
        step2_expression(np.array([1.0, -1.0, 0.5, 0.2, 0.1]), 1.5, 0, 1)
    with pytest.raises(PreconditionError):
        step2_expression(np.ones(5), 1.5, 2, 2)


def test_step3_display_matches_flow(rng):
    S, H = _gauge_pair(5, 31, rng)
    check = step3_consistency(S, H, 1.5)
    assert check.relative_error < 1e-6


def test_step3_s_term_is_nonnegative_for_nonnegative_operator():
    S = CurvatureSampler(5, seed=3).sample("psd_operator")
    H = SymmetricForm(np.diag([2.0, 1.0, 1.0, 0.0, 0.0]))
    check = step3_consistency(S, H, 1.5)
    assert check.boundary_gap == pytest.approx(0.0, abs=1e-12)
    assert check.s_term >= -1e-12


def test_theta_bar_for_five_dimensions():
    theta = theta_bar_estimate(5)
    assert theta == pytest.approx(0.1, rel=1e-6)
    assert analytic_theta_bar(5) == pytest.approx(theta, rel=1e-9)
    assert validate_step4(0.99 * theta, 5, samples=200)["violations"] == 0
    assert validate_step4(1.2 * theta, 5, samples=10)["violations"] > 0
    assert validate_step4(2.0 * theta, 5, samples=10)["violations"] > 0
    with pytest.raises(PreconditionError):
        theta_bar_estimate(4)


def test_step4_forms_agree_on_the_boundary(rng):
    theta, sigma = 0.05, 1.5
    H = SymmetricForm.diag(rng.uniform(0.1, 0.3, size=5))
    scal_s = H.trace() / theta
    assert step4_direct(H, scal_s, theta, sigma) == pytest.approx(
        step4_derivative(H, scal_s, theta, sigma), rel=1e-10)
    with pytest.raises(PreconditionError):
        step4_derivative(H, 2.0 * scal_s, theta, sigma)


def test_sample_seeds_do_not_depend_on_threads():
    assert sample_seeds(7, 4) == sample_seeds(7, 4)
    assert sample_seeds(7, 4)[:2] == sample_seeds(7, 2)


@pytest.mark.slow
def test_small_invariance_probe():
    report = invariance_probe(ConeSpec(1.5, 0.05), 5, samples=2, seed=3, horizon=3.0, restarts=4)
    assert report.passed
    data = report.to_dict()
    assert data["verdict"] == "PASS"
    assert len(data["samples"]) == 2


@pytest.mark.slow
def test_small_transversality_probe():
    report = transversality_probe(ConeSpec(1.5, 0.05), 5, samples=2, seed=5, restarts=4)
    assert report.passed
    assert report.min_slack > 0.0


def test_transversality_preconditions():
    with pytest.raises(PreconditionError):
        transversality_probe(ConeSpec(1.0, 0.05), 5, samples=1)
    with pytest.raises(PreconditionError):
        transversality_probe(ConeSpec(1.5, 0.0), 5, samples=1)
