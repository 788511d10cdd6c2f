"""Starting values for unobserved state functions deduced from the ODE.

Each rule takes the smoothed observed states at the quadrature nodes and
returns values of the unobserved states there; the caller projects those
onto the spline bases.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import least_squares

from .errors import ConfigurationError

__all__ = ["INVERSION_RULES", "invert_unobserved", "project"]


def _vdp_rule(t, x, dx, theta, model):
    # first equation solved for x2
    x1 = x[:, 0]
    return {1: x1 - x1**3 / 3.0 - dx[:, 0] / theta[0]}


def _cumulative(t, v):
    order = np.argsort(t)
    out = np.empty_like(v)
    out[order] = cumulative_trapezoid(v[order], t[order], initial=0.0)
    return out


def _coupled_vdp_rule(t, x, dx, theta, model, grid=np.linspace(-3.0, 3.0, 13)):
    # x1, x3 are antiderivatives of the observed x2, x4; the two integration
    # constants are fitted to the remaining equations
    base1 = _cumulative(t, x[:, 1])
    base3 = _cumulative(t, x[:, 3])

    def states(c):
        full = x.copy()
        full[:, 0] = base1 + c[0]
        full[:, 2] = base3 + c[1]
        return full

    def residual(c):
        rhs = model.f(t, states(c), theta)
        return np.concatenate([dx[:, 1] - rhs[:, 1], dx[:, 3] - rhs[:, 3]])

    best = min(((a, b) for a in grid for b in grid), key=lambda c: float(np.sum(residual(c) ** 2)))
    c = least_squares(residual, np.array(best, dtype=float)).x
    full = states(c)
    return {0: full[:, 0], 2: full[:, 2]}


INVERSION_RULES = {
    ("van_der_pol", (1,)): _vdp_rule,
    ("coupled_vdp", (0, 2)): _coupled_vdp_rule,
}


def project(basis_matrix, weights, values):
    """Weighted least squares fit of nodal ``values`` onto a basis."""
    w = np.sqrt(weights)
    return np.linalg.lstsq(basis_matrix * w[:, None], values * w, rcond=None)[0]


def invert_unobserved(model, colloc, parts, theta, unobserved):
    """Replace the coefficient blocks of unobserved states using an inversion rule."""
    rule = INVERSION_RULES.get((model.name, tuple(unobserved)))
    if rule is None:
        known = ", ".join(f"{name} (unobserved {list(u)})" for name, u in INVERSION_RULES)
        raise ConfigurationError(f"no ODE inversion rule for {model.name} with unobserved "
                                 f"{list(unobserved)}; available: {known}")
    t = colloc.rule.nodes
    x = np.column_stack([colloc.B0[j] @ a for j, a in enumerate(parts)])
    dx = np.column_stack([colloc.B1[j] @ a for j, a in enumerate(parts)])
    theta = np.asarray(theta, dtype=float)
    values = rule(t, x, dx, theta, model)
    parts = list(parts)
    for j, v in values.items():
        parts[j] = project(colloc.B0[j].toarray(), colloc.rule.weights, v)
    return parts
