"""Closed form, RK4 and the least squares baseline."""
import numpy as np
import pytest
from scipy.integrate import solve_ivp

from qlode.errors import ConfigurationError, DomainError, NumericalError
from qlode.models import linear_model, model_first_order, model_lotka_volterra, model_van_der_pol
from qlode.reference import analytic_first_order, nls_fit, rk4_dense, rk4_solve
from qlode.simulation import generate_dataset

LV_THETA = (0.481, 0.025, 0.927, 0.028)


@pytest.mark.parametrize("t,x", [(0.0, 1.0), (1.0, 1.0), (2.0, 1 / 3)])
def test_closed_form_values(t, x):
    assert analytic_first_order([t], (1, 1), 1.0).states[0, 0] == pytest.approx(x, rel=1e-15)


def test_closed_form_pole():
    # 1/x0 - theta1 t + theta2 t^2 has roots 1 and 2 for theta = (3, 1), x0 = 1/2
    with pytest.raises(DomainError, match="pole"):
        analytic_first_order(np.linspace(0, 1.5, 5), (3, 1), 0.5)
    analytic_first_order(np.linspace(0, 0.9, 5), (3, 1), 0.5)


def test_rk4_matches_closed_form():
    t = np.linspace(0, 2, 2001)
    num = rk4_solve(model_first_order(), (1, 1), [1.0], (0, 2), 2000)
    np.testing.assert_allclose(num.times, t)
    assert np.max(np.abs(num.states[:, 0] - analytic_first_order(t, (1, 1), 1.0).states[:, 0])) < 1e-8


def test_dense_output_between_steps():
    sol = rk4_dense(model_first_order(), (1, 1), [1.0], (0, 2), 2000)
    t = np.random.default_rng(0).uniform(0, 2, 300)
    assert np.max(np.abs(sol(t)[:, 0] - analytic_first_order(t, (1, 1), 1.0).states[:, 0])) < 1e-8
    traj = rk4_solve(model_first_order(), (1, 1), [1.0], (0, 2), 2000, times=t)
    np.testing.assert_array_equal(traj.states, sol(t))
    with pytest.raises(DomainError):
        sol([2.5])


def test_rk4_constant_for_zero_rhs():
    zero = linear_model(lambda t, th: np.zeros((2, 2)), 2)
    traj = rk4_solve(zero, [1.0], [0.3, -2.0], (0, 5), 50)
    assert np.all(traj.states == np.array([0.3, -2.0]))


def test_rk4_order():
    m = model_first_order()
    errs = []
    for n in (50, 100, 200):
        x = rk4_solve(m, (1, 1), [1.0], (0, 2), n).states[-1, 0]
        errs.append(abs(x - analytic_first_order([2.0], (1, 1), 1.0).states[0, 0]))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all((orders > 3.7) & (orders < 4.3))


def test_rk4_against_adaptive_solver():
    m = model_van_der_pol((0, 1))
    t = np.linspace(0, 10, 41)
    ref = solve_ivp(lambda s, x: m.f(s, x, [1.0]), (0, 10), [1.0, 1.0], t_eval=t, rtol=1e-11, atol=1e-12)
    num = rk4_dense(m, [1.0], [1.0, 1.0], (0, 10))(t)
    assert np.max(np.abs(num - ref.y.T)) < 1e-8


def test_lotka_volterra_first_integral():
    b, z, d, e = LV_THETA
    traj = rk4_solve(model_lotka_volterra(), LV_THETA, [30.0, 4.0], (0, 20), 10000)
    x1, x2 = traj.states.T
    inv = d * np.log(x1) - e * x1 + b * np.log(x2) - z * x2
    assert np.max(np.abs(inv - inv[0])) < 1e-6


def test_van_der_pol_reproducible():
    a = rk4_solve(model_van_der_pol(), [1.0], [1.0, 1.0], (0, 10))
    b = rk4_solve(model_van_der_pol(), [1.0], [1.0, 1.0], (0, 10))
    assert np.array_equal(a.states, b.states)


def test_blow_up():
    with pytest.raises(NumericalError, match="blew up"):
        rk4_solve(model_first_order(), (5, 0), [1.0], (0, 2), 100)


def test_steps_validated():
    with pytest.raises(ConfigurationError):
        rk4_solve(model_first_order(), (1, 1), [1.0], (0, 2), 0)


def closed(t, th, x0):
    return analytic_first_order(t, th, x0[0]).states


def test_nls_noiseless():
    m = model_first_order()
    data = generate_dataset(m, (1, 1), [1.0], 60, 0.0, 2.0, seed=5)
    r = nls_fit(data, (0.8, 1.2), [0.9], closed_form=closed)
    assert r.converged
    np.testing.assert_allclose(r.theta, [1, 1], atol=1e-6)
    assert abs(r.x0[0] - 1) < 1e-6


def test_nls_rk4_route_and_fixed_x0():
    m = model_first_order()
    data = generate_dataset(m, (1, 1), [1.0], 60, 0.02, 2.0, seed=6)
    a = nls_fit(data, (0.9, 1.1), [1.0], closed_form=closed, fix_x0=True)
    b = nls_fit(data, (0.9, 1.1), [1.0], model=m, domain=(0, 2), fix_x0=True)
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-6)
    assert a.x0[0] == 1.0 and np.isnan(a.x0_se[0])
    assert np.all(a.theta_se > 0)
    assert a.tau == pytest.approx((60 - 2) / a.rss)


def test_nls_needs_a_route():
    data = generate_dataset(model_first_order(), (1, 1), [1.0], 10, 0.02, 2.0, seed=6)
    with pytest.raises(ConfigurationError):
        nls_fit(data, (1, 1), [1.0])


def test_nls_partially_observed():
    m = model_van_der_pol()
    data = generate_dataset(m, [1.0], [1.0, 1.0], 100, 0.05, 10.0, seed=8)
    r = nls_fit(data, [0.9], [1.0, 1.0], model=m, domain=(0, 10), n_steps=2000)
    assert abs(r.theta[0] - 1.0) < 0.05
