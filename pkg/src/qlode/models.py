"""ODE systems with analytic state Jacobians.

Every right-hand side is vectorised: ``t`` has shape ``(n,)`` (or is a
scalar), ``x`` has shape ``(n, d)`` (or ``(d,)``) and ``f`` returns the same
shape as ``x``; ``jac_x`` appends a trailing ``(d, d)`` block whose entry
``(j, k)`` is the partial derivative of ``f_j`` with respect to ``x_k``.

State indices are 0-based in the Python API.  File formats use 1-based
indices and convert at the I/O boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigurationError, SingularParameterError

__all__ = [
    "OdeModel",
    "StateCondition",
    "model_first_order",
    "model_van_der_pol",
    "model_coupled_vdp",
    "model_lotka_volterra",
    "linear_model",
    "validate_jacobian",
    "get_model",
    "MODELS",
]


@dataclass(frozen=True)
class OdeModel:
    name: str
    d: int
    param_names: tuple[str, ...]
    rhs: Callable = field(repr=False)
    jac: Callable = field(repr=False)
    observed: tuple[int, ...]
    default_theta: tuple[float, ...] | None = None
    state_names: tuple[str, ...] | None = None
    # polynomial degree of the right-hand side in (x, t); None when not polynomial
    rhs_degree: tuple[int, int] | None = None

    def __post_init__(self):
        if not self.observed:
            raise ConfigurationError("a model needs at least one observed state")
        if any(j < 0 or j >= self.d for j in self.observed):
            raise ConfigurationError(f"observed states {self.observed} out of range for d={self.d}")
        object.__setattr__(self, "observed", tuple(sorted(set(int(j) for j in self.observed))))

    @property
    def q(self) -> int:
        return len(self.param_names)

    def f(self, t, x, theta) -> np.ndarray:
        t, x, theta = _prep(t, x, theta, self)
        return self.rhs(t, x, theta)

    def jac_x(self, t, x, theta) -> np.ndarray:
        t, x, theta = _prep(t, x, theta, self)
        return self.jac(t, x, theta)

    def with_observed(self, observed) -> "OdeModel":
        return replace(self, observed=tuple(observed))


def _prep(t, x, theta, model):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.d:
        raise ConfigurationError(f"{model.name}: state has {x.shape[-1]} components, expected {model.d}")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != model.q:
        raise ConfigurationError(f"{model.name}: expected {model.q} parameters, got {theta.shape[0]}")
    t = np.asarray(t, dtype=float)
    return t, x, theta


@dataclass(frozen=True)
class StateCondition:
    """Prescribed value ``x_state(t0) = value`` (state index 0-based)."""

    t0: float
    state_index: int
    value: float


def _first_order_f(t, x, th):
    a = th[0] - 2.0 * th[1] * t
    return (a * x[..., 0] ** 2)[..., None]


def _first_order_j(t, x, th):
    a = th[0] - 2.0 * th[1] * t
    return (2.0 * a * x[..., 0])[..., None, None]


def model_first_order() -> OdeModel:
    """x' = (theta1 - 2 theta2 t) x^2."""
    return OdeModel(
        name="first_order",
        d=1,
        param_names=("theta1", "theta2"),
        rhs=_first_order_f,
        jac=_first_order_j,
        observed=(0,),
        default_theta=(1.0, 1.0),
        state_names=("x",),
        rhs_degree=(2, 1),
    )


def _vdp_check(theta):
    if theta[0] == 0.0:
        raise SingularParameterError("Van der Pol parameter theta must be nonzero")


def _vdp_f(t, x, th):
    _vdp_check(th)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([th[0] * (x1 - x1**3 / 3.0 - x2), x1 / th[0]], axis=-1)


def _vdp_j(t, x, th):
    _vdp_check(th)
    x1 = x[..., 0]
    out = np.zeros(x.shape[:-1] + (2, 2))
    out[..., 0, 0] = th[0] * (1.0 - x1**2)
    out[..., 0, 1] = -th[0]
    out[..., 1, 0] = 1.0 / th[0]
    return out


def model_van_der_pol(observed=(0,)) -> OdeModel:
    """x1' = theta (x1 - x1^3/3 - x2), x2' = x1 / theta."""
    return OdeModel(
        name="van_der_pol",
        d=2,
        param_names=("theta",),
        rhs=_vdp_f,
        jac=_vdp_j,
        observed=tuple(observed),
        default_theta=(1.0,),
        state_names=("x1", "x2"),
        rhs_degree=(3, 0),
    )


def _cvdp_f(t, x, th):
    kappa, w1, w2, b1, b2, c1, c2 = th
    x1, x2, x3, x4 = (x[..., i] for i in range(4))
    f2 = kappa * (x1 - w1) * (x1 - w2) * x2 - b1 * x1 + c1 * (x3 - x1)
    f4 = kappa * (x3 - w1) * (x3 - w2) * x4 - b2 * x3 + c2 * (x1 - x3)
    return np.stack([x2, f2, x4, f4], axis=-1)


def _cvdp_j(t, x, th):
    kappa, w1, w2, b1, b2, c1, c2 = th
    x1, x2, x3, x4 = (x[..., i] for i in range(4))
    out = np.zeros(x.shape[:-1] + (4, 4))
    out[..., 0, 1] = 1.0
    out[..., 1, 0] = kappa * (2.0 * x1 - w1 - w2) * x2 - b1 - c1
    out[..., 1, 1] = kappa * (x1 - w1) * (x1 - w2)
    out[..., 1, 2] = c1
    out[..., 2, 3] = 1.0
    out[..., 3, 0] = c2
    out[..., 3, 2] = kappa * (2.0 * x3 - w1 - w2) * x4 - b2 - c2
    out[..., 3, 3] = kappa * (x3 - w1) * (x3 - w2)
    return out


def model_coupled_vdp(observed=(1, 3)) -> OdeModel:
    """Two coupled relaxation oscillators (SA and AV heart nodes).

    Parameters are ``(kappa, w1, w2, b1, b2, c1, c2)``.  By default only the
    derivative states ``x2`` and ``x4`` are observed.
    """
    return OdeModel(
        name="coupled_vdp",
        d=4,
        param_names=("kappa", "w1", "w2", "b1", "b2", "c1", "c2"),
        rhs=_cvdp_f,
        jac=_cvdp_j,
        observed=tuple(observed),
        default_theta=(-1.8, -0.2, 2.0, 1.5, 0.1, 0.0, 0.55),
        state_names=("x1", "x2", "x3", "x4"),
        rhs_degree=(3, 0),
    )


def _lv_f(t, x, th):
    beta, zeta, delta, eta = th
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x1 * (beta - zeta * x2), -x2 * (delta - eta * x1)], axis=-1)


def _lv_j(t, x, th):
    beta, zeta, delta, eta = th
    x1, x2 = x[..., 0], x[..., 1]
    out = np.empty(x.shape[:-1] + (2, 2))
    out[..., 0, 0] = beta - zeta * x2
    out[..., 0, 1] = -zeta * x1
    out[..., 1, 0] = eta * x2
    out[..., 1, 1] = -delta + eta * x1
    return out


def model_lotka_volterra(observed=(0, 1)) -> OdeModel:
    """Prey x1 and predator x2 with parameters ``(beta, zeta, delta, eta)``."""
    return OdeModel(
        name="lotka_volterra",
        d=2,
        param_names=("beta", "zeta", "delta", "eta"),
        rhs=_lv_f,
        jac=_lv_j,
        observed=tuple(observed),
        default_theta=(0.481, 0.025, 0.927, 0.028),
        state_names=("hare", "lynx"),
        rhs_degree=(2, 0),
    )


def linear_model(matrix_fn, d: int, observed=None, name="linear") -> OdeModel:
    """x' = A(t, theta) x for a user supplied ``matrix_fn(t, theta) -> (..., d, d)``.

    Mostly useful for tests: quasilinearization of a linear system is exact.
    """

    def jac(t, x, th):
        a = np.asarray(matrix_fn(t, th), dtype=float)
        return np.broadcast_to(a, x.shape[:-1] + (d, d)).copy()

    def rhs(t, x, th):
        return np.einsum("...jk,...k->...j", jac(t, x, th), x)

    n_par = 1
    return OdeModel(
        name=name,
        d=d,
        param_names=tuple(f"p{i + 1}" for i in range(n_par)),
        rhs=rhs,
        jac=jac,
        observed=tuple(range(d)) if observed is None else tuple(observed),
        default_theta=(1.0,),
    )


MODELS = {
    "first_order": model_first_order,
    "van_der_pol": model_van_der_pol,
    "coupled_vdp": model_coupled_vdp,
    "lotka_volterra": model_lotka_volterra,
}


def get_model(name: str, observed=None) -> OdeModel:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    model = factory()
    return model if observed is None else model.with_observed(observed)


def validate_jacobian(model: OdeModel, samples: int = 100, seed: int = 0,
                      theta_center=None, t_max: float = 10.0, step: float = 1e-6) -> float:
    """Largest gap between ``jac_x`` and a central-difference Jacobian.

    States are drawn from ``[-3, 3]^d`` and parameters from a +/-50% box
    around ``theta_center`` (the model's reference values by default).
    """
    if samples < 1:
        raise ConfigurationError("validate_jacobian needs at least one sample")
    rng = np.random.default_rng(seed)
    center = np.asarray(theta_center if theta_center is not None else model.default_theta, dtype=float)
    worst = 0.0
    for _ in range(samples):
        t = rng.uniform(0.0, t_max)
        x = rng.uniform(-3.0, 3.0, size=model.d)
        theta = center * rng.uniform(0.5, 1.5, size=center.shape)
        jac = model.jac_x(t, x, theta)
        fd = np.empty((model.d, model.d))
        for k in range(model.d):
            e = np.zeros(model.d)
            e[k] = step
            fd[:, k] = (model.f(t, x + e, theta) - model.f(t, x - e, theta)) / (2 * step)
        worst = max(worst, float(np.max(np.abs(jac - fd))))
    return worst
