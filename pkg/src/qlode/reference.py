"""Ground-truth trajectories and a nonlinear least squares baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .data import Dataset
from .errors import ConfigurationError, DomainError, NumericalError, QlodeError
from .models import OdeModel

__all__ = [
    "Trajectory",
    "Rk4Solution",
    "analytic_first_order",
    "rk4_solve",
    "rk4_dense",
    "default_steps",
    "NlsResult",
    "nls_fit",
]


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        x = np.asarray(self.states, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != t.shape[0]:
            raise ConfigurationError("times and states disagree in length")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)


def analytic_first_order(t, theta, x0: float) -> Trajectory:
    """Closed-form solution of x' = (theta1 - 2 theta2 t) x^2, x(0) = x0."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    th1, th2 = (float(v) for v in theta)
    if x0 == 0:
        return Trajectory(t, np.zeros_like(t))
    if t.size:
        lo, hi = float(t.min()), float(t.max())
        if th2 != 0:
            roots = np.roots([th2, -th1, 1.0 / x0])
        elif th1 != 0:
            roots = np.array([1.0 / (x0 * th1)])
        else:
            roots = np.array([])
        for root in roots:
            if abs(root.imag) < 1e-14 and lo <= root.real <= hi:
                raise DomainError(f"closed-form solution has a pole at t = {root.real:.6g}")
    denom = th2 * t**2 - th1 * t + 1.0 / x0
    return Trajectory(t, 1.0 / denom)


def default_steps(T: float) -> int:
    return 2000 if T <= 2.0 else 10000


class Rk4Solution:
    """Fixed-step classical RK4 grid with quartic dense output.

    Between grid points the interpolant matches the state at both ends and
    at the midpoint (an extra RK4 half step), plus the slopes at both ends.
    """

    def __init__(self, model: OdeModel, theta, x0, T: float, n_steps: int):
        if n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")
        self.model = model
        self.theta = np.asarray(theta, dtype=float)
        self.h = T / n_steps
        self.T = float(T)
        self.n_steps = int(n_steps)
        d = model.d
        grid = np.linspace(0.0, T, n_steps + 1)
        x = np.empty((n_steps + 1, d))
        x[0] = np.asarray(x0, dtype=float).reshape(d)
        f = self._f
        h = self.h
        with np.errstate(all="ignore"):
            for n in range(n_steps):
                x[n + 1] = self._step(grid[n], x[n], h)
                if not np.all(np.isfinite(x[n + 1])):
                    raise NumericalError(f"RK4 solution blew up after t = {grid[n]:.6g}")
            slopes = f(grid, x)
        self.grid = grid
        self.x = x
        self.slopes = slopes

    def _f(self, t, x):
        return self.model.rhs(np.asarray(t, dtype=float), x, self.theta)

    def _step(self, t, x, h):
        f = self._f
        k1 = f(t, x)
        k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = f(t + h, x + h * k3)
        return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def trajectory(self) -> Trajectory:
        return Trajectory(self.grid, self.x)

    def __call__(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if times.size and (times.min() < -1e-12 * self.T or times.max() > self.T * (1 + 1e-12)):
            raise DomainError(f"requested times outside [0, {self.T}]")
        times = np.clip(times, 0.0, self.T)
        h = self.h
        idx = np.minimum((times / h).astype(int), self.n_steps - 1)
        s = (times - self.grid[idx]) / h
        x0, x1 = self.x[idx], self.x[idx + 1]
        f0, f1 = self.slopes[idx] * h, self.slopes[idx + 1] * h
        with np.errstate(all="ignore"):
            xm = self._step(self.grid[idx], x0, 0.5 * h)
        s = s[:, None]
        # cubic Hermite plus a bubble s^2 (1-s)^2 matching the midpoint value
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        cubic_mid = 0.5 * (x0 + x1) + 0.125 * (f0 - f1)
        bubble = 16.0 * (xm - cubic_mid)
        return h00 * x0 + h10 * f0 + h01 * x1 + h11 * f1 + bubble * (s**2) * (1 - s) ** 2


def rk4_dense(model: OdeModel, theta, x0, domain, n_steps: int | None = None) -> Rk4Solution:
    T = float(domain[1]) if np.ndim(domain) else float(domain)
    return Rk4Solution(model, theta, x0, T, default_steps(T) if n_steps is None else n_steps)


def rk4_solve(model: OdeModel, theta, x0, domain, n_steps: int | None = None, times=None) -> Trajectory:
    """Integrate on ``n_steps`` uniform steps over ``domain``.

    Returns the grid trajectory, or the dense-output states at ``times``.
    """
    sol = rk4_dense(model, theta, x0, domain, n_steps)
    if times is None:
        return sol.trajectory()
    return Trajectory(np.asarray(times, dtype=float), sol(times))


@dataclass
class NlsResult:
    theta: np.ndarray
    x0: np.ndarray
    theta_se: np.ndarray
    x0_se: np.ndarray
    tau: float
    rss: float
    converged: bool
    nfev: int


def nls_fit(data: Dataset, init_theta, init_x0, model: OdeModel | None = None,
            closed_form=None, domain=None, fix_x0: bool = False,
            n_steps: int | None = None, max_nfev: int = 2000) -> NlsResult:
    """Least squares fit of (theta, x0) with the trajectory from a closed form
    ``closed_form(t, theta, x0) -> (n, d) array`` or from RK4 on ``model``.

    With ``fix_x0`` the initial state stays at ``init_x0``.  Standard errors
    use the linearized covariance ``s^2 (J'J)^-1``.
    """
    init_theta = np.asarray(init_theta, dtype=float).reshape(-1)
    init_x0 = np.atleast_1d(np.asarray(init_x0, dtype=float))
    q = init_theta.size
    if closed_form is None:
        if model is None or domain is None:
            raise ConfigurationError("nls_fit needs a closed form or a model with a domain")
        steps = default_steps(float(domain[1])) if n_steps is None else n_steps

        def trajectory(times, theta, x0):
            return rk4_dense(model, theta, x0, domain, steps)(times)
    else:
        def trajectory(times, theta, x0):
            out = np.asarray(closed_form(times, theta, x0), dtype=float)
            return out.reshape(times.size, -1)

    all_t = np.concatenate(data.times)
    order = np.argsort(all_t, kind="stable")
    y = np.concatenate(data.values)
    which = np.concatenate([np.full(t.size, j) for j, t in zip(data.states, data.times)])
    n_obs = y.size

    def unpack(p):
        theta = p[:q]
        x0 = init_x0 if fix_x0 else p[q:]
        return theta, x0

    big = 1e6 * (np.std(y) + 1.0)

    def residuals(p):
        theta, x0 = unpack(p)
        try:
            with np.errstate(all="ignore"):
                states = trajectory(all_t[order], theta, x0)
            pred = np.empty(n_obs)
            pred[order] = states[np.arange(n_obs), which[order]]
        except QlodeError:
            return np.full(n_obs, big)
        if not np.all(np.isfinite(pred)):
            return np.full(n_obs, big)
        return y - pred

    p0 = init_theta if fix_x0 else np.concatenate([init_theta, init_x0])
    sol = least_squares(residuals, p0, method="lm", xtol=1e-12, ftol=1e-12, gtol=1e-12,
                        max_nfev=max_nfev * p0.size)
    p = sol.x
    rss = float(np.sum(sol.fun**2))
    dof = max(n_obs - p.size, 1)
    s2 = rss / dof
    jtj = sol.jac.T @ sol.jac
    try:
        cov = s2 * np.linalg.inv(jtj)
        se = np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
    except np.linalg.LinAlgError:
        se = np.full(p.size, np.nan)
    theta, x0 = unpack(p)
    return NlsResult(
        theta=np.array(theta),
        x0=np.array(x0),
        theta_se=se[:q],
        x0_se=np.full(init_x0.size, np.nan) if fix_x0 else se[q:],
        tau=dof / rss if rss > 0 else np.inf,
        rss=rss,
        converged=bool(sol.success),
        nfev=int(sol.nfev),
    )
