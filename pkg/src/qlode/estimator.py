"""Quasilinearized ODE-penalized spline estimation.

Each outer iteration
  (a) linearizes the ODE penalty around the current spline,
  (b) solves the resulting linear system for the spline coefficients,
  (c) refreshes the measurement precision from the effective dimension,
  (d) refreshes the ODE-compliance weights (Schall update, optional),
  (e) searches the ODE parameters on the profiled data fit,
  (f) stops once every block changed by less than ``convergence_tol``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .bspline import BSplineBasis, design_matrix
from .data import Dataset
from .errors import ConfigurationError, DegenerateFitError, NumericalError, QlodeError
from .initial import invert_unobserved
from .models import OdeModel, StateCondition
from .optimize import nelder_mead
from .penalty import Collocation, PenaltyAssembly, exact_per_span
from .smoothing import psmooth

__all__ = [
    "FitConfig",
    "EstimatorState",
    "FitResult",
    "TraceRecord",
    "Constraints",
    "build_constraints",
    "build_data_terms",
    "update_alpha",
    "update_tau",
    "effective_dimension",
    "update_gamma",
    "check_convergence",
    "QLProblem",
    "fit",
]

PRECISION_CAP = 1e12


@dataclass
class FitConfig:
    bases: tuple[BSplineBasis, ...]
    init_theta: tuple[float, ...]
    init_alpha: str = "psmooth"  # psmooth | constant | given
    alpha0: np.ndarray | None = None
    unobserved_init: str = "zero"  # zero | invert | ode
    init_tau: float | tuple[float, ...] | None = None
    init_gamma: float | tuple[float, ...] = 1e6
    gamma_mode: str = "schall"  # schall | fixed
    gamma_pooling: str = "pooled"  # pooled | per_equation
    tau_pooling: str = "pooled"  # pooled | per_state
    constraint_mode: str = "none"  # none | soft | lagrange
    kappa: float = 1e6
    conditions: tuple[StateCondition, ...] = ()
    convergence_tol: float = 1e-4
    max_iter: int = 200
    per_span: int | None = None  # None: exact for polynomial models
    simplex_tol: float = 1e-6
    polish: bool = True
    search_point: str = "current"  # current | updated
    compute_se: bool = True

    def validate(self, model: OdeModel):
        if len(self.bases) != model.d:
            raise ConfigurationError(f"need {model.d} bases, got {len(self.bases)}")
        if len({b.T for b in self.bases}) != 1:
            raise ConfigurationError("all bases must share one domain")
        if len(self.init_theta) != model.q:
            raise ConfigurationError(f"init_theta needs {model.q} values, got {len(self.init_theta)}")
        choices = {
            "init_alpha": ("psmooth", "constant", "given"),
            "unobserved_init": ("zero", "invert", "ode"),
            "search_point": ("current", "updated"),
            "gamma_mode": ("schall", "fixed"),
            "gamma_pooling": ("pooled", "per_equation"),
            "tau_pooling": ("pooled", "per_state"),
            "constraint_mode": ("none", "soft", "lagrange"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.init_alpha == "given" and self.alpha0 is None:
            raise ConfigurationError("init_alpha='given' requires alpha0")
        if not self.convergence_tol > 0:
            raise ConfigurationError("convergence_tol must be positive")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be >= 1")
        if self.constraint_mode == "soft" and not self.kappa > 0:
            raise ConfigurationError("kappa must be positive in soft mode")
        if self.constraint_mode != "none" and not self.conditions:
            raise ConfigurationError(f"constraint_mode={self.constraint_mode!r} needs conditions")
        gamma = np.broadcast_to(np.asarray(self.init_gamma, dtype=float), (model.d,))
        if np.any(gamma <= 0):
            raise ConfigurationError("init_gamma must be positive")
        if self.init_tau is not None and np.any(np.asarray(self.init_tau, dtype=float) <= 0):
            raise ConfigurationError("init_tau must be positive")
        T = self.bases[0].T
        for c in self.conditions:
            if not 0 <= c.t0 <= T:
                raise ConfigurationError(f"condition time {c.t0} outside [0, {T}]")
            if not 0 <= c.state_index < model.d:
                raise ConfigurationError(f"condition state {c.state_index} out of range")


@dataclass
class EstimatorState:
    alpha: np.ndarray
    theta: np.ndarray
    tau: np.ndarray  # one entry per observed state
    gamma: np.ndarray  # one entry per equation
    ed: float = 0.0
    iteration: int = 0


@dataclass
class TraceRecord:
    iteration: int
    theta: np.ndarray
    gamma: np.ndarray
    tau: np.ndarray
    ed: float
    penalty: float  # compliance-weighted linearized penalty
    ode_misfit: float  # unit-weight penalty, summed over equations
    rss: float
    nfev: int
    constraint_residual: float = float("nan")  # max |S alpha - s| of the step-(b) spline


@dataclass
class FitResult:
    model_name: str
    param_names: tuple[str, ...]
    theta_hat: np.ndarray
    theta_se: np.ndarray
    tau_hat: np.ndarray
    gamma_hat: np.ndarray
    alpha_hat: np.ndarray
    ed: float
    iterations: int
    converged: bool
    bases: tuple[BSplineBasis, ...] = field(repr=False)
    observed: tuple[int, ...] = ()
    trace: list[TraceRecord] = field(default_factory=list, repr=False)
    rss: float = float("nan")
    n_obs: int = 0

    @property
    def tau(self) -> float:
        return float(np.mean(self.tau_hat))

    @property
    def gamma_bar(self) -> float:
        return float(np.mean(self.gamma_hat))

    def coefficients(self, j: int) -> np.ndarray:
        off = np.concatenate([[0], np.cumsum([b.K for b in self.bases])])
        return self.alpha_hat[off[j] : off[j + 1]]

    def states(self, times, deriv: int = 0) -> np.ndarray:
        """Fitted state functions at ``times``, shape (n, d)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        return np.column_stack(
            [design_matrix(b, times, deriv) @ self.coefficients(j) for j, b in enumerate(self.bases)]
        )


@dataclass(frozen=True)
class Constraints:
    mode: str  # none | soft | lagrange
    S: sp.csr_matrix | None = None
    s: np.ndarray | None = None
    kappa: float = 1e6


def build_constraints(conditions, bases, mode: str = "lagrange", kappa: float = 1e6) -> Constraints:
    """Rows of ``S`` hold the basis of the conditioned state at ``t0``."""
    if mode == "none" or not conditions:
        return Constraints("none")
    offsets = np.concatenate([[0], np.cumsum([b.K for b in bases])])
    K = int(offsets[-1])
    S = np.zeros((len(conditions), K))
    s = np.empty(len(conditions))
    for i, c in enumerate(conditions):
        b = bases[c.state_index]
        S[i, offsets[c.state_index] : offsets[c.state_index + 1]] = design_matrix(b, [c.t0])[0]
        s[i] = c.value
    return Constraints(mode, sp.csr_matrix(S), s, float(kappa))


def _observation_design(data: Dataset, bases):
    """Stacked design (N x K) placing each observation in its state block."""
    offsets = np.concatenate([[0], np.cumsum([b.K for b in bases])])
    K = int(offsets[-1])
    blocks, ys, which = [], [], []
    for i, (j, t, y) in enumerate(zip(data.states, data.times, data.values)):
        B = design_matrix(bases[j], t, sparse=True).tocoo()
        blocks.append(sp.csr_matrix((B.data, (B.row, B.col + offsets[j])), shape=(t.size, K)))
        ys.append(y)
        which.append(np.full(t.size, i))
    return sp.vstack(blocks).tocsr(), np.concatenate(ys), np.concatenate(which)


def build_data_terms(data: Dataset, bases, tau):
    """Block-diagonal ``G`` and vector ``g`` of the data-fit quadratic.

    ``tau`` holds one precision per observed state, in ``data.states`` order.
    Unobserved states contribute zero blocks.
    """
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (len(data.states),))
    sizes = [b.K for b in bases]
    blocks = [sp.csr_matrix((k, k)) for k in sizes]
    gs = [np.zeros(k) for k in sizes]
    for i, (j, t, y) in enumerate(zip(data.states, data.times, data.values)):
        B = design_matrix(bases[j], t, sparse=True)
        blocks[j] = (tau[i] * (B.T @ B)).tocsr()
        gs[j] = tau[i] * (B.T @ y)
    return sp.block_diag(blocks, format="csr"), np.concatenate(gs)


class _System:
    """Factorized coefficient system for one (G, g, assembly, constraints).

    When the assembly knows its linearization coefficients, the system is
    solved for the correction ``alpha - alpha_prev`` with a right-hand side
    built from nodal ODE residuals; this avoids cancelling the large
    ``R alpha`` against ``r`` when the compliance weights are big.
    """

    def __init__(self, G, g, assembly: PenaltyAssembly, constraints: Constraints | None = None):
        c = constraints or Constraints("none")
        A = (G + assembly.R).tocsc()
        K = g.size
        base = assembly.alpha_prev
        if base is not None and assembly.grad_prev is not None:
            rhs = g - G @ base - assembly.grad_prev
        else:
            base = np.zeros(K)
            rhs = g - assembly.r
        self.K = K
        self.n_con = 0
        if c.mode == "soft":
            A = (A + c.kappa * (c.S.T @ c.S)).tocsc()
            rhs = rhs + c.kappa * (c.S.T @ (c.s - c.S @ base))
        elif c.mode == "lagrange":
            self.n_con = c.S.shape[0]
            A = sp.bmat([[A, c.S.T], [c.S, None]], format="csc")
            rhs = np.concatenate([rhs, c.s - c.S @ base])
        try:
            self.lu = splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise NumericalError(
                f"coefficient system is singular ({exc}); add data, use fewer knots or a positive gamma"
            ) from None
        sol = self.lu.solve(rhs)
        # one refinement step keeps constraint rows exact despite large penalty weights
        sol += self.lu.solve(rhs - A @ sol)
        if not np.all(np.isfinite(sol)):
            raise NumericalError(
                "coefficient system is singular; add data, use fewer knots or a positive gamma"
            )
        self.alpha = base + sol[:K]
        self.multipliers = sol[K:]

    def solve_columns(self, cols):
        cols = np.asarray(cols, dtype=float)
        if self.n_con:
            cols = np.vstack([cols, np.zeros((self.n_con, cols.shape[1]))])
        return self.lu.solve(cols)[: self.K]


def update_alpha(G, g, assembly: PenaltyAssembly, constraints: Constraints | None = None,
                 return_multipliers: bool = False):
    """Maximizer of the linearized fit criterion over the spline coefficients."""
    system = _System(G, g, assembly, constraints)
    if return_multipliers:
        return system.alpha, system.multipliers
    return system.alpha


def effective_dimension(G, assembly: PenaltyAssembly) -> float:
    """``trace[(G + R)^-1 G]``."""
    system = _System(G, np.zeros(G.shape[0]), assembly)
    Gd = G.toarray() if sp.issparse(G) else np.asarray(G)
    return float(np.trace(system.solve_columns(Gd)))


def update_tau(rss, n_obs, ed, cap: float = PRECISION_CAP):
    """``(N - ED) / RSS`` elementwise; a zero residual is capped with a warning."""
    rss = np.atleast_1d(np.asarray(rss, dtype=float))
    n_obs = np.atleast_1d(np.asarray(n_obs, dtype=float))
    ed = np.atleast_1d(np.asarray(ed, dtype=float))
    if np.any(ed >= n_obs):
        raise DegenerateFitError(f"effective dimension {ed} reached the number of observations {n_obs}")
    with np.errstate(divide="ignore"):
        tau = (n_obs - ed) / rss
    if np.any(~np.isfinite(tau) | (tau > cap)):
        warnings.warn("residual sum of squares vanished; precision capped", RuntimeWarning, stacklevel=2)
        tau = np.where(np.isfinite(tau), np.minimum(tau, cap), cap)
    return tau


def update_gamma(assembly: PenaltyAssembly, alpha_new, ed, pooling: str = "pooled",
                 cap: float = PRECISION_CAP):
    """Schall update ``gamma = ED / PEN`` with PEN at unit compliance.

    ``pooled`` shares one value over all equations; ``per_equation`` takes
    ``ed`` as one effective dimension per equation.
    """
    pen = assembly.components(alpha_new)
    d = pen.size
    if pooling == "pooled":
        ed = np.full(1, float(np.sum(ed)))
        pen = np.full(1, float(pen.sum()))
    else:
        ed = np.broadcast_to(np.asarray(ed, dtype=float), (d,))
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = ed / pen
    capped = ~(pen > 0) | ~(gamma <= cap)
    if np.any(capped):
        warnings.warn("ODE penalty vanished; compliance capped", RuntimeWarning, stacklevel=2)
        gamma = np.where(capped, cap, gamma)
    return np.broadcast_to(gamma, (d,)).copy()


def _rel_change(new, old) -> float:
    new = np.atleast_1d(np.asarray(new, dtype=float))
    old = np.atleast_1d(np.asarray(old, dtype=float))
    diff = np.abs(new - old)
    small = np.abs(old) < 1e-12
    rel = np.where(small, diff, diff / np.where(small, 1.0, np.abs(old)))
    return float(rel.max()) if rel.size else 0.0


def check_convergence(prev: EstimatorState, new: EstimatorState, tol: float) -> bool:
    """True when the largest relative change over alpha, gamma, theta and tau is below ``tol``."""
    worst = max(
        _rel_change(new.alpha, prev.alpha),
        _rel_change(new.gamma, prev.gamma),
        _rel_change(new.theta, prev.theta),
        _rel_change(new.tau, prev.tau),
    )
    return worst < tol


class QLProblem:
    """Fixed pieces of one fit: model, data, bases, quadrature, constraints."""

    def __init__(self, model: OdeModel, data: Dataset, config: FitConfig):
        config.validate(model)
        T = config.bases[0].T
        data.check_against(model.d, T=T)
        self.model = model
        self.data = data
        self.config = config
        self.bases = tuple(config.bases)
        per_span = exact_per_span(model, self.bases) if config.per_span is None else config.per_span
        self.colloc = Collocation(self.bases, per_span=per_span)
        self.K = self.colloc.K
        self.Bobs, self.y, self.which = _observation_design(data, self.bases)
        self.n_obs = np.array([t.size for t in data.times])
        self.constraints = build_constraints(
            config.conditions, self.bases, config.constraint_mode, config.kappa
        )
        self._tau_key = None

    # data terms depend on tau only; cache the latest
    def data_terms(self, tau):
        key = tuple(np.asarray(tau, dtype=float))
        if key != self._tau_key:
            self._G, self._g = build_data_terms(self.data, self.bases, tau)
            self._tau_key = key
        return self._G, self._g

    def system(self, theta, gamma, tau, alpha_lin):
        G, g = self.data_terms(tau)
        asm = self.colloc.assemble(self.model, theta, gamma, alpha_prev=alpha_lin)
        return asm, _System(G, g, asm, self.constraints)

    def constraint_residual(self, alpha) -> float:
        c = self.constraints
        if c.mode == "none":
            return float("nan")
        return float(np.max(np.abs(c.S @ alpha - c.s)))

    def residuals(self, alpha):
        return self.y - self.Bobs @ alpha

    def rss_by_state(self, alpha):
        res = self.residuals(alpha)
        return np.bincount(self.which, weights=res**2, minlength=len(self.n_obs))

    def weighted_rss(self, theta, gamma, tau, alpha_lin) -> float:
        _, system = self.system(theta, gamma, tau, alpha_lin)
        return float(np.dot(tau, self.rss_by_state(system.alpha)))

    def ed_parts(self, assembly: PenaltyAssembly, system: _System, tau):
        """Smoother trace split by observed state and by coefficient block.

        State conditions are left out: the trace is taken for ``G + R`` as in
        the unconstrained problem, so prescribed values do not use up
        effective dimension.
        """
        if self.constraints.mode != "none":
            G, _ = self.data_terms(tau)
            system = _System(G, np.zeros(self.K), assembly)
        Z = system.solve_columns(self.Bobs.T.toarray())  # K x N
        contrib = np.asarray(self.Bobs.multiply(Z.T).sum(axis=1)).ravel() * tau[self.which]
        by_obs = np.bincount(self.which, weights=contrib, minlength=len(self.n_obs))
        weighted = self.Bobs.multiply(Z.T).multiply(tau[self.which][:, None]).tocsc()
        col_sums = np.asarray(weighted.sum(axis=0)).ravel()
        off = self.colloc.offsets
        by_block = np.array([col_sums[off[j] : off[j + 1]].sum() for j in range(len(self.bases))])
        return by_obs, by_block

    # -- initialisation ------------------------------------------------------

    def initial_state(self) -> EstimatorState:
        cfg, model, data = self.config, self.model, self.data
        d = model.d
        theta = np.asarray(cfg.init_theta, dtype=float).copy()
        parts = [np.zeros(b.K) for b in self.bases]
        sigma2 = np.full(len(data.states), np.nan)
        need_smooth = cfg.init_alpha == "psmooth" or cfg.init_tau is None
        for i, (j, t, y) in enumerate(zip(data.states, data.times, data.values)):
            if need_smooth:
                ps = psmooth(self.bases[j], t, y)
                sigma2[i] = ps.sigma2
                if cfg.init_alpha == "psmooth":
                    parts[j] = ps.alpha
            if cfg.init_alpha == "constant":
                parts[j] = np.full(self.bases[j].K, float(np.mean(y)))
        if cfg.init_alpha == "given":
            alpha = np.asarray(cfg.alpha0, dtype=float).reshape(-1)
            if alpha.size != self.K:
                raise ConfigurationError(f"alpha0 has length {alpha.size}, expected {self.K}")
        else:
            unobserved = [j for j in range(d) if j not in data.states]
            if unobserved and cfg.unobserved_init == "invert":
                parts = invert_unobserved(model, self.colloc, parts, theta, unobserved)
            alpha = np.concatenate(parts)

        if cfg.init_tau is not None:
            tau = np.broadcast_to(np.asarray(cfg.init_tau, dtype=float), (len(data.states),)).copy()
        elif cfg.tau_pooling == "pooled":
            tau = np.full(len(data.states), 1.0 / float(np.average(sigma2, weights=self.n_obs)))
        else:
            tau = 1.0 / sigma2
        gamma = np.broadcast_to(np.asarray(cfg.init_gamma, dtype=float), (d,)).copy()
        if cfg.init_alpha != "given" and cfg.unobserved_init == "ode" and len(data.states) < d:
            alpha = self.settle(alpha, theta, gamma, tau)
        return EstimatorState(alpha=alpha, theta=theta, tau=tau, gamma=gamma)

    def settle(self, alpha, theta, gamma, tau, max_iter: int = 100, tol: float = 1e-6):
        """Repeat the coefficient update with everything else frozen until alpha stops moving."""
        for _ in range(max_iter):
            _, system = self.system(theta, gamma, tau, alpha)
            done = _rel_change(system.alpha, alpha) < tol
            alpha = system.alpha
            if done:
                break
        return alpha

    # -- parameter search ----------------------------------------------------

    def update_theta(self, theta0, gamma, tau, alpha_lin, step=None):
        """Minimize the tau-weighted residual sum of squares of the profiled spline."""

        def objective(th):
            return self.weighted_rss(th, gamma, tau, alpha_lin)

        res = nelder_mead(objective, theta0, step=step, xtol=self.config.simplex_tol)
        theta, best = res.x, res.fun
        nfev = res.nfev
        if not np.isfinite(best):
            raise NumericalError("no parameter value gave a finite data fit")
        if self.config.polish:
            theta, best, extra = self._gauss_newton(theta, best, gamma, tau, alpha_lin)
            nfev += extra
        return theta, best, res.converged, nfev

    def _weighted_residuals(self, theta, gamma, tau, alpha_lin):
        _, system = self.system(theta, gamma, tau, alpha_lin)
        return np.sqrt(tau[self.which]) * self.residuals(system.alpha)

    def _gauss_newton(self, theta, best, gamma, tau, alpha_lin):
        try:
            r0 = self._weighted_residuals(theta, gamma, tau, alpha_lin)
            jac = np.empty((r0.size, theta.size))
            for k in range(theta.size):
                h = 1e-6 * max(abs(theta[k]), 1e-2)
                tp = theta.copy()
                tp[k] += h
                jac[:, k] = (self._weighted_residuals(tp, gamma, tau, alpha_lin) - r0) / h
            delta = np.linalg.lstsq(jac, -r0, rcond=None)[0]
            cand = theta + delta
            val = self.weighted_rss(cand, gamma, tau, alpha_lin)
        except QlodeError:
            return theta, best, theta.size + 1
        if np.isfinite(val) and val < best:
            return cand, val, theta.size + 2
        return theta, best, theta.size + 2

    def standard_errors(self, theta, gamma, tau, alpha_lin, rel_step: float = 1e-4):
        """SE from the inverse of the negative Hessian of the log-likelihood in theta.

        The Hessian is a central finite-difference Hessian of
        ``0.5 * sum_j tau_j RSS_j(theta)``, re-solving the spline at each probe.
        """
        theta = np.asarray(theta, dtype=float)
        q = theta.size
        h = rel_step * np.maximum(np.abs(theta), 1e-2)

        def fun(th):
            return 0.5 * self.weighted_rss(th, gamma, tau, alpha_lin)

        f0 = fun(theta)
        hess = np.empty((q, q))
        for a in range(q):
            ea = np.zeros(q)
            ea[a] = h[a]
            hess[a, a] = (fun(theta + ea) - 2 * f0 + fun(theta - ea)) / h[a] ** 2
            for b in range(a):
                eb = np.zeros(q)
                eb[b] = h[b]
                val = (
                    fun(theta + ea + eb) - fun(theta + ea - eb) - fun(theta - ea + eb) + fun(theta - ea - eb)
                ) / (4 * h[a] * h[b])
                hess[a, b] = hess[b, a] = val
        try:
            np.linalg.cholesky(hess)
            cov = np.linalg.inv(hess)
            return np.sqrt(np.diag(cov))
        except np.linalg.LinAlgError:
            warnings.warn("Hessian of the data fit is not positive definite; "
                          "standard errors unavailable", RuntimeWarning, stacklevel=2)
            diag = np.diag(np.linalg.pinv(hess))
            return np.where(diag > 0, np.sqrt(np.abs(diag)), np.nan)


def fit(model: OdeModel, data: Dataset, config: FitConfig) -> FitResult:
    """Run the quasilinearized estimation loop until convergence or ``max_iter``.

    On non-convergence the last iterate is returned with ``converged=False``.
    """
    problem = QLProblem(model, data, config)
    cfg = config
    state = problem.initial_state()
    trace: list[TraceRecord] = []
    converged = False
    n_total = float(problem.n_obs.sum())
    prev_theta = None
    for it in range(1, cfg.max_iter + 1):
        try:
            # (a) + (b)
            alpha_lin = state.alpha
            asm, system = problem.system(state.theta, state.gamma, state.tau, alpha_lin)
            alpha_new = system.alpha
            # (c)
            ed_obs, ed_block = problem.ed_parts(asm, system, state.tau)
            ed = float(ed_obs.sum())
            rss = problem.rss_by_state(alpha_new)
            if cfg.tau_pooling == "pooled":
                tau_new = np.full_like(state.tau, update_tau(rss.sum(), n_total, ed)[0])
            else:
                tau_new = update_tau(rss, problem.n_obs, ed_obs)
            # (d)
            if cfg.gamma_mode == "schall":
                if cfg.gamma_pooling == "pooled":
                    gamma_new = update_gamma(asm, alpha_new, ed)
                else:
                    ed_eq = np.where(ed_block > 1e-12 * ed, ed_block, ed)
                    gamma_new = update_gamma(asm, alpha_new, ed_eq, pooling="per_equation")
            else:
                gamma_new = state.gamma.copy()
            # (e)
            step = None
            if prev_theta is not None:
                step = _simplex_step(state.theta, prev_theta)
            alpha_search = alpha_lin if cfg.search_point == "current" else alpha_new
            theta_new, _, _, nfev = problem.update_theta(state.theta, gamma_new, tau_new, alpha_search, step=step)
            asm_new, system_new = problem.system(theta_new, gamma_new, tau_new, alpha_search)
            alpha_ref = system_new.alpha
        except QlodeError as exc:
            raise type(exc)(f"iteration {it}: {exc}") from exc

        new = EstimatorState(alpha=alpha_ref, theta=theta_new, tau=tau_new, gamma=gamma_new, ed=ed, iteration=it)
        pen_unit = asm.components(alpha_new)
        trace.append(
            TraceRecord(
                iteration=it,
                theta=theta_new.copy(),
                gamma=gamma_new.copy(),
                tau=tau_new.copy(),
                ed=ed,
                penalty=asm.value(alpha_new),
                ode_misfit=float(pen_unit.sum()),
                rss=float(problem.rss_by_state(alpha_ref).sum()),
                nfev=nfev,
                constraint_residual=problem.constraint_residual(alpha_new),
            )
        )
        # (f)
        done = check_convergence(state, new, cfg.convergence_tol)
        prev_theta = state.theta
        state = new
        if done:
            converged = True
            break

    alpha_final = state.alpha
    if cfg.compute_se:
        se = problem.standard_errors(state.theta, state.gamma, state.tau, alpha_final)
    else:
        se = np.full(model.q, np.nan)
    return FitResult(
        model_name=model.name,
        param_names=model.param_names,
        theta_hat=state.theta,
        theta_se=se,
        tau_hat=state.tau,
        gamma_hat=state.gamma,
        alpha_hat=state.alpha,
        ed=state.ed,
        iterations=state.iteration,
        converged=converged,
        bases=problem.bases,
        observed=data.states,
        trace=trace,
        rss=float(problem.rss_by_state(state.alpha).sum()),
        n_obs=int(n_total),
    )


def _simplex_step(theta, prev_theta):
    """Initial simplex edge sized to the last parameter move, within [1e-3, 5e-2] relative."""
    scale = np.where(theta != 0, np.abs(theta), 2.5e-4 / 0.05)
    move = 2.0 * np.abs(theta - prev_theta)
    return np.clip(move, 1e-3 * scale, 5e-2 * scale)
