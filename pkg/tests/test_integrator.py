import numpy as np
import pytest

from utils.integrator import DormandPrince45


def _integrate(solver, fun, y, t_end, h):
    t, k = 0.0, fun(0.0, y)
    while t < t_end:
        h = min(h, t_end - t)
        y_new, error, k_new = solver.step(fun, t, y, h, k)
        err = solver.error_norm(error, y, y_new)
        if err <= 1.0:
            t, y, k = t + h, y_new, k_new
        h *= solver.factor(err)
    return y


def test_exponential_decay():
    solver = DormandPrince45(rtol=1e-10)
    y = _integrate(solver, lambda t, y: -y, np.array([1.0, 2.0]), 2.0, 0.1)
    np.testing.assert_allclose(y, np.exp(-2.0) * np.array([1.0, 2.0]), rtol=1e-8)


def test_fifth_order_step_is_exact_for_quartic_time():
    solver = DormandPrince45()
    y_new, error, _ = solver.step(lambda t, y: np.array([4.0 * t ** 3]), 0.0, np.array([0.0]), 0.5)
    assert y_new[0] == pytest.approx(0.5 ** 4, rel=1e-12)
    assert abs(error[0]) < 1e-12


def test_step_controller_limits():
    solver = DormandPrince45()
    assert solver.factor(0.0) == solver.max_factor
    assert solver.factor(1e12) == solver.min_factor
    assert solver.initial_step(lambda t, y: y * 0.0, 0.0, np.array([1.0])) == 1e-6
