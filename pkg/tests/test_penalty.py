"""Quasilinearized penalty assembly."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import linearized_penalty, random_draw, spline_states
from qlode.bspline import build_basis, design_matrix
from qlode.errors import ConfigurationError
from qlode.models import MODELS, get_model, linear_model, model_first_order, model_van_der_pol
from qlode.penalty import (
    Collocation,
    LinearizationPoint,
    assemble,
    exact_per_span,
    penalty_value,
    residual_weight,
)
from qlode.quadrature import build_rule
from qlode.reference import analytic_first_order

SMALL_BASES = {
    "first_order": (2.0, 8),
    "van_der_pol": (10.0, 12),
    "coupled_vdp": (20.0, 15),
    "lotka_volterra": (20.0, 12),
}


def small_colloc(name, per_span=10):
    T, n = SMALL_BASES[name]
    m = get_model(name)
    bases = tuple(build_basis((0, T), n, 4) for _ in range(m.d))
    return m, Collocation(bases, per_span=per_span)


def test_residual_weight_first_order():
    b = build_basis((0, 1), 3, 4)
    point = LinearizationPoint(np.ones(b.K), (b,))
    J, v = residual_weight(model_first_order(), (1, 1), point, 0.0)
    assert J[0, 0] == pytest.approx(2.0)
    assert v[0] == pytest.approx(-1.0)


def test_residual_weight_van_der_pol(rng):
    b = build_basis((0, 5), 6, 4)
    alpha = rng.normal(size=2 * b.K)
    t = np.linspace(0, 5, 7)
    J, v = residual_weight(model_van_der_pol(), [1.7], LinearizationPoint(alpha, (b, b)), t)
    x1 = design_matrix(b, t) @ alpha[: b.K]
    np.testing.assert_allclose(v[:, 0], 2 * 1.7 / 3 * x1**3, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(v[:, 1], 0, atol=1e-14)
    assert J.shape == (7, 2, 2)


def test_residual_weight_linear_model_is_zero(rng):
    A = np.array([[0.0, 1.0], [-3.0, 0.2]])
    m = linear_model(lambda t, th: A, 2)
    b = build_basis((0, 3), 5, 4)
    _, v = residual_weight(m, [1.0], LinearizationPoint(rng.normal(size=2 * b.K), (b, b)), np.linspace(0, 3, 9))
    np.testing.assert_allclose(v, 0, atol=1e-13)


def test_point_length_checked():
    b = build_basis((0, 1), 3, 4)
    with pytest.raises(ConfigurationError):
        LinearizationPoint(np.zeros(3), (b,))


def test_zero_gamma_vanishes(rng):
    m, c = small_colloc("van_der_pol")
    asm = c.assemble(m, [1.0], [0.0, 0.0], alpha_prev=rng.normal(size=c.K))
    assert abs(asm.R).max() == 0 and np.all(asm.r == 0) and asm.l == 0


def test_zero_rhs_is_roughness(rng):
    zero = linear_model(lambda t, th: np.zeros((1, 1)), 1)
    b = build_basis((0, 2), 6, 4)
    c = Collocation((b,))
    asm = c.assemble(zero, [1.0], [1.0], alpha_prev=rng.normal(size=b.K))
    rule = c.rule
    B1 = design_matrix(b, rule.nodes, 1)
    np.testing.assert_allclose(asm.R.toarray(), B1.T @ (rule.weights[:, None] * B1), atol=1e-12)
    assert np.all(asm.r == 0) and asm.l == 0


def test_functional_assemble_matches_collocation(rng):
    m, c = small_colloc("lotka_volterra", per_span=5)
    alpha_prev = rng.normal(size=c.K)
    theta = m.default_theta
    point = LinearizationPoint(alpha_prev, c.bases)
    a1 = assemble(m, theta, [1.0, 2.0], point, build_rule(c.bases))
    a2 = c.assemble(m, theta, [1.0, 2.0], alpha_prev=alpha_prev)
    np.testing.assert_allclose(a1.R.toarray(), a2.R.toarray())
    np.testing.assert_allclose(a1.r, a2.r)


def test_penalty_value_checks_length():
    m, c = small_colloc("first_order")
    asm = c.assemble(m, (1, 1), [1.0], alpha_prev=np.ones(c.K))
    assert penalty_value(asm, np.zeros(c.K)) == asm.l
    with pytest.raises(ConfigurationError):
        penalty_value(asm, np.zeros(c.K + 1))


def test_gamma_shape_and_sign_checked():
    m, c = small_colloc("van_der_pol")
    with pytest.raises(ConfigurationError):
        c.assemble(m, [1.0], [1.0], alpha_prev=np.ones(c.K))
    with pytest.raises(ConfigurationError):
        c.assemble(m, [1.0], [1.0, -1.0], alpha_prev=np.ones(c.K))


def test_exact_solution_has_small_penalty():
    m = model_first_order()
    b = build_basis((0, 2), 20, 4)
    c = Collocation((b,))
    t = np.linspace(0, 2, 400)
    alpha = np.linalg.lstsq(design_matrix(b, t), analytic_first_order(t, (1, 1), 1.0).states[:, 0], rcond=None)[0]
    gamma = 1e3
    asm = c.assemble(m, (1, 1), [gamma], alpha_prev=alpha)
    assert 0 <= asm.value(alpha) < 1e-4 * gamma


@pytest.mark.parametrize("name", sorted(MODELS))
def test_oracle_equivalence(name):
    m, c = small_colloc(name)
    rng = np.random.default_rng(7)
    for _ in range(5):
        alpha, alpha_prev, theta, gamma = random_draw(m, c.bases, rng)
        asm = c.assemble(m, theta, gamma, alpha_prev=alpha_prev)
        ref = linearized_penalty(m, theta, gamma, c.bases, alpha, alpha_prev)
        assert abs(asm.value(alpha) - ref) <= 1e-8 * abs(ref)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_components_match_value(name, rng):
    m, c = small_colloc(name)
    alpha, alpha_prev, theta, gamma = random_draw(m, c.bases, rng)
    asm = c.assemble(m, theta, gamma, alpha_prev=alpha_prev)
    assert gamma @ asm.components(alpha) == pytest.approx(asm.value(alpha), rel=1e-9)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_gradient_at_linearization_point(name, rng):
    # residual-form R alpha_prev + r agrees with the assembled matrices
    m, c = small_colloc(name)
    _, alpha_prev, theta, gamma = random_draw(m, c.bases, rng)
    asm = c.assemble(m, theta, gamma, alpha_prev=alpha_prev)
    direct = asm.R @ alpha_prev + asm.r
    np.testing.assert_allclose(asm.grad_prev, direct, rtol=1e-9, atol=1e-9 * np.abs(direct).max())


@pytest.mark.parametrize("name", sorted(MODELS))
@settings(max_examples=15)
@given(seed=st.integers(0, 2**32 - 1))
def test_symmetric_psd_and_nonnegative(name, seed):
    m, c = small_colloc(name, per_span=5)
    rng = np.random.default_rng(seed)
    alpha, alpha_prev, theta, gamma = random_draw(m, c.bases, rng)
    asm = c.assemble(m, theta, gamma, alpha_prev=alpha_prev)
    R = asm.R.toarray()
    assert np.max(np.abs(R - R.T)) <= 1e-10 * np.max(np.abs(R))
    eig = np.linalg.eigvalsh(R)
    assert eig[0] >= -1e-8 * eig[-1]
    assert asm.value(alpha) >= -1e-9
    assert asm.l >= 0


@pytest.mark.parametrize("name", sorted(MODELS))
def test_gamma_linearity(name, rng):
    m, c = small_colloc(name, per_span=5)
    _, alpha_prev, theta, gamma = random_draw(m, c.bases, rng)
    a1 = c.assemble(m, theta, gamma, alpha_prev=alpha_prev)
    a2 = c.assemble(m, theta, 2 * gamma, alpha_prev=alpha_prev)
    np.testing.assert_allclose(a2.R.toarray(), 2 * a1.R.toarray(), rtol=1e-13, atol=1e-13 * abs(a1.R).max())
    np.testing.assert_allclose(a2.r, 2 * a1.r, rtol=1e-13, atol=1e-13 * np.abs(a1.r).max())
    assert a2.l == pytest.approx(2 * a1.l, rel=1e-13)


def rotating_model():
    def A(t, th):
        t = np.asarray(t, dtype=float)[..., None, None]
        return np.array([[0.0, 1.0], [-1.0, 0.0]]) + t * np.array([[-0.1, 0.0], [0.3, 0.05]])

    return linear_model(A, 2)


@settings(max_examples=10)
@given(seed=st.integers(0, 2**32 - 1))
def test_linear_system_independent_of_point(seed):
    m = rotating_model()
    b = build_basis((0, 4), 10, 4)
    c = Collocation((b, b))
    rng = np.random.default_rng(seed)
    a1 = c.assemble(m, [1.0], [1.0, 3.0], alpha_prev=rng.normal(size=c.K))
    a2 = c.assemble(m, [1.0], [1.0, 3.0], alpha_prev=10 * rng.normal(size=c.K))
    for _ in range(10):
        alpha = rng.normal(size=c.K)
        v1, v2 = a1.value(alpha), a2.value(alpha)
        assert abs(v1 - v2) <= 1e-9 * max(abs(v1), 1.0)


def test_nonlinear_model_depends_on_point(rng):
    m, c = small_colloc("van_der_pol")
    alpha = rng.normal(size=c.K)
    a1 = c.assemble(m, [1.0], [1.0, 1.0], alpha_prev=rng.normal(size=c.K))
    a2 = c.assemble(m, [1.0], [1.0, 1.0], alpha_prev=rng.normal(size=c.K))
    assert abs(a1.value(alpha) - a2.value(alpha)) > 1e-3


def test_oracle_helpers_agree_with_design_matrix(rng):
    b = build_basis((0, 3), 5, 4)
    alpha = rng.normal(size=b.K)
    t = np.linspace(0, 3, 11)
    np.testing.assert_allclose(spline_states((b,), alpha, t)[:, 0], design_matrix(b, t) @ alpha, atol=1e-13)


@pytest.mark.parametrize("name,expected", [("first_order", 8), ("van_der_pol", 10), ("coupled_vdp", 10),
                                           ("lotka_volterra", 7)])
def test_exact_density(name, expected):
    m, c = small_colloc(name)
    assert exact_per_span(m, c.bases) == expected
    assert exact_per_span(linear_model(lambda t, th: np.eye(1), 1), c.bases[:1]) == 5


@pytest.mark.parametrize("name", sorted(MODELS))
def test_exact_density_matches_oracle_on_wide_bases(name):
    # many knots and large random coefficients stress the polynomial degree, not the knot count
    m = get_model(name)
    bases = tuple(build_basis((0, 5.0), 60, 4) for _ in range(m.d))
    c = Collocation(bases, per_span=exact_per_span(m, bases))
    rng = np.random.default_rng(11)
    alpha, alpha_prev, theta, gamma = random_draw(m, bases, rng, scale=3.0)
    asm = c.assemble(m, theta, gamma, alpha_prev=alpha_prev)
    ref = linearized_penalty(m, theta, gamma, bases, alpha, alpha_prev)
    assert abs(asm.value(alpha) - ref) <= 1e-10 * abs(ref)
