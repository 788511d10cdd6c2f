"""Quasilinearized ODE penalty as a quadratic form in the spline coefficients.

Around a linearization point ``x_prev`` (the spline with coefficients
``alpha_prev``) the j-th penalty is

    PEN_j(alpha) = int ( x_j'(t) - sum_k J_jk(t) x_k(t) - v_j(t) )^2 dt,
    J = df/dx at x_prev,   v_j = f_j(x_prev) - sum_k J_jk x_prev_k,

and ``sum_j gamma_j PEN_j = alpha' R alpha + 2 alpha' r + l``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bspline import BSplineBasis, design_matrix, local_basis
from .errors import ConfigurationError, NumericalError
from .models import OdeModel
from .quadrature import DEFAULT_PER_SPAN, QuadratureRule, build_rule

__all__ = [
    "LinearizationPoint",
    "PenaltyAssembly",
    "Collocation",
    "residual_weight",
    "assemble",
    "penalty_value",
    "exact_per_span",
]


@dataclass(frozen=True)
class LinearizationPoint:
    alpha_prev: np.ndarray
    bases: tuple[BSplineBasis, ...]

    def __post_init__(self):
        alpha = np.asarray(self.alpha_prev, dtype=float).reshape(-1)
        object.__setattr__(self, "alpha_prev", alpha)
        object.__setattr__(self, "bases", tuple(self.bases))
        total = sum(b.K for b in self.bases)
        if alpha.shape[0] != total:
            raise ConfigurationError(
                f"alpha_prev has length {alpha.shape[0]}, bases need {total}"
            )


@dataclass(frozen=True)
class PenaltyAssembly:
    R: sp.csr_matrix = field(repr=False)
    r: np.ndarray = field(repr=False)
    l: float
    gamma: np.ndarray
    # nodal quantities of the linearization, kept for per-equation penalties
    colloc: "Collocation" = field(repr=False, compare=False)
    jac: np.ndarray = field(repr=False, compare=False)
    v: np.ndarray = field(repr=False, compare=False)
    # coefficients of the linearization point and R alpha_prev + r there,
    # computed from nodal ODE residuals so it carries no cancellation error
    alpha_prev: np.ndarray | None = field(default=None, repr=False, compare=False)
    grad_prev: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def K(self) -> int:
        return self.r.shape[0]

    def value(self, alpha) -> float:
        return penalty_value(self, alpha)

    def components(self, alpha) -> np.ndarray:
        """Unit-compliance penalty of each equation at ``alpha``."""
        c = self.colloc
        x, dx = c.values(alpha)
        res = dx - np.einsum("njk,nk->nj", self.jac, x) - self.v
        return c.rule.weights @ res**2


def penalty_value(assembly: PenaltyAssembly, alpha) -> float:
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if alpha.shape[0] != assembly.K:
        raise ConfigurationError(f"alpha has length {alpha.shape[0]}, expected {assembly.K}")
    return float(alpha @ (assembly.R @ alpha) + 2.0 * alpha @ assembly.r + assembly.l)


def exact_per_span(model: OdeModel, bases) -> int:
    """Gauss points per span that integrate the squared residual exactly.

    For a right-hand side of degree ``p`` in x and ``q`` in t and splines of
    degree ``k`` the residual has degree ``p k + q``, so ``p k + q + 1`` points
    suffice. Non-polynomial models fall back to the default density.
    """
    if model.rhs_degree is None:
        return DEFAULT_PER_SPAN
    p, q = model.rhs_degree
    k = max(b.degree for b in bases)
    return max(DEFAULT_PER_SPAN, max(p, 1) * k + q + 1)


class Collocation:
    """Spline bases evaluated on a shared quadrature rule.

    Precomputes a sparse operator mapping per-node coefficients to the
    nonzero entries of R, so that re-assembling at a new parameter value is
    a single sparse matrix-vector product.
    """

    def __init__(self, bases, rule: QuadratureRule | None = None, per_span: int = DEFAULT_PER_SPAN):
        bases = tuple(bases)
        if not bases:
            raise ConfigurationError("at least one basis is required")
        self.bases = bases
        self.d = len(bases)
        self.rule = rule if rule is not None else build_rule(bases, per_span)
        self.sizes = np.array([b.K for b in bases])
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.K = int(self.offsets[-1])
        nodes = self.rule.nodes
        self.n_nodes = nodes.shape[0]
        self.B0 = [design_matrix(b, nodes, 0, sparse=True) for b in bases]
        self.B1 = [design_matrix(b, nodes, 1, sparse=True) for b in bases]
        self.B0T = [m.T.tocsr() for m in self.B0]
        self.B1T = [m.T.tocsr() for m in self.B1]
        self._build_kernel()

    def split(self, alpha) -> list[np.ndarray]:
        alpha = np.asarray(alpha, dtype=float).reshape(-1)
        if alpha.shape[0] != self.K:
            raise ConfigurationError(f"alpha has length {alpha.shape[0]}, expected {self.K}")
        return [alpha[self.offsets[j] : self.offsets[j + 1]] for j in range(self.d)]

    def values(self, alpha):
        """Spline states and their derivatives at the nodes, each (n_nodes, d)."""
        parts = self.split(alpha)
        x = np.column_stack([self.B0[j] @ parts[j] for j in range(self.d)])
        dx = np.column_stack([self.B1[j] @ parts[j] for j in range(self.d)])
        return x, dx

    def _build_kernel(self):
        d, n = self.d, self.n_nodes
        w = self.rule.weights
        nodes = self.rule.nodes
        local0 = [local_basis(b, nodes, 0) for b in self.bases]
        local1 = [local_basis(b, nodes, 1) for b in self.bases]
        node = np.arange(n)

        # term ids: (k, l, kind) with kind 0: b0 b0', 1: b1_k b0_l', 2: b0_k b1_l', 3: b1 b1'
        rows, cols, vals, coef_cols = [], [], [], []
        self._terms = []
        for k in range(d):
            for l in range(d):
                kinds = [(0, local0[k], local0[l]), (1, local1[k], local0[l]), (2, local0[k], local1[l])]
                if k == l:
                    kinds.append((3, local1[k], local1[k]))
                for kind, (uk, fk), (ul, fl) in kinds:
                    tid = len(self._terms)
                    self._terms.append((k, l, kind))
                    mk, ml = uk.shape[1], ul.shape[1]
                    prod = w[:, None, None] * uk[:, :, None] * ul[:, None, :]
                    rr = self.offsets[k] + fk[:, None, None] + np.arange(mk)[None, :, None]
                    cc = self.offsets[l] + fl[:, None, None] + np.arange(ml)[None, None, :]
                    rows.append(np.broadcast_to(rr, prod.shape).reshape(-1))
                    cols.append(np.broadcast_to(cc, prod.shape).reshape(-1))
                    vals.append(prod.reshape(-1))
                    coef_cols.append(np.broadcast_to((tid * n + node)[:, None, None], prod.shape).reshape(-1))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        keys = rows.astype(np.int64) * self.K + cols
        uniq, pos = np.unique(keys, return_inverse=True)
        self._pattern_cols = (uniq % self.K).astype(np.int32)
        pattern_rows = uniq // self.K
        self._indptr = np.searchsorted(pattern_rows, np.arange(self.K + 1)).astype(np.int32)
        self._kernel = sp.csr_matrix(
            (np.concatenate(vals), (pos, np.concatenate(coef_cols))),
            shape=(uniq.shape[0], len(self._terms) * n),
        )
        terms = np.array(self._terms)
        self._term_k, self._term_l, self._term_kind = terms[:, 0], terms[:, 1], terms[:, 2]

    def linearize(self, model: OdeModel, theta, alpha_prev=None, x_prev=None):
        """Jacobian (n, d, d) and remainder v (n, d) at the nodes."""
        if model.d != self.d:
            raise ConfigurationError(f"model has d={model.d} but {self.d} bases were given")
        jac, v, _ = self._linearize(model, theta, alpha_prev, x_prev)
        return jac, v

    def _linearize(self, model, theta, alpha_prev, x_prev):
        if x_prev is None:
            x_prev, _ = self.values(alpha_prev)
        t = self.rule.nodes
        with np.errstate(all="ignore"):
            f = model.f(t, x_prev, theta)
            jac = model.jac_x(t, x_prev, theta)
            v = f - np.einsum("njk,nk->nj", jac, x_prev)
        if not (np.all(np.isfinite(jac)) and np.all(np.isfinite(v))):
            bad = ~np.all(np.isfinite(v), axis=1) | ~np.all(np.isfinite(jac), axis=(1, 2))
            raise NumericalError(
                f"linearized right-hand side is not finite at t = {t[np.argmax(bad)]!r}"
            )
        return jac, v, f

    def assemble(self, model: OdeModel, theta, gamma, alpha_prev=None, x_prev=None) -> PenaltyAssembly:
        gamma = np.asarray(gamma, dtype=float).reshape(-1)
        if gamma.shape[0] != self.d:
            raise ConfigurationError(f"gamma has {gamma.shape[0]} entries, expected {self.d}")
        if np.any(gamma < 0) or not np.all(np.isfinite(gamma)):
            raise ConfigurationError("gamma must be finite and nonnegative")
        jac, v, f = self._linearize(model, theta, alpha_prev, x_prev)
        n = self.n_nodes
        tk, tl, kind = self._term_k, self._term_l, self._term_kind
        coef = np.empty((len(self._terms), n))
        # sum_j gamma_j J_jk J_jl for every (k, l)
        gjj = np.einsum("j,njk,njl->kln", gamma, jac, jac)
        sel = kind == 0
        coef[sel] = gjj[tk[sel], tl[sel]]
        sel = kind == 1
        coef[sel] = -gamma[tk[sel], None] * jac[:, tk[sel], tl[sel]].T
        sel = kind == 2
        coef[sel] = -gamma[tl[sel], None] * jac[:, tl[sel], tk[sel]].T
        sel = kind == 3
        coef[sel] = gamma[tk[sel], None]
        data = self._kernel @ coef.reshape(-1)
        R = sp.csr_matrix((data, self._pattern_cols, self._indptr), shape=(self.K, self.K))
        R = ((R + R.T) * 0.5).tocsr()

        w = self.rule.weights
        gv = gamma[None, :] * v
        r = np.empty(self.K)
        for k in range(self.d):
            s = self.offsets[k]
            e = self.offsets[k + 1]
            r[s:e] = self.B0T[k] @ (w * (gv * jac[:, :, k]).sum(axis=1)) - self.B1T[k] @ (w * gv[:, k])
        l = float(w @ (gv * v).sum(axis=1))
        if not (np.all(np.isfinite(data)) and np.all(np.isfinite(r)) and np.isfinite(l)):
            raise NumericalError("penalty assembly produced non-finite entries")
        grad = None
        if alpha_prev is not None:
            alpha_prev = np.asarray(alpha_prev, dtype=float).reshape(-1)
            grad = self._residual_gradient(alpha_prev, jac, f, gamma)
        return PenaltyAssembly(R=R, r=r, l=l, gamma=gamma, colloc=self, jac=jac, v=v,
                               alpha_prev=alpha_prev, grad_prev=grad)

    def _residual_gradient(self, alpha_prev, jac, f, gamma):
        """``R alpha_prev + r`` as sum_j gamma_j int L_j' e_j with e the ODE residual."""
        _, dx = self.values(alpha_prev)
        ge = gamma[None, :] * (dx - f) * self.rule.weights[:, None]
        out = np.empty(self.K)
        for k in range(self.d):
            s, e = self.offsets[k], self.offsets[k + 1]
            out[s:e] = self.B1T[k] @ ge[:, k] - self.B0T[k] @ (ge * jac[:, :, k]).sum(axis=1)
        return out


def residual_weight(model: OdeModel, theta, point: LinearizationPoint, t):
    """State Jacobian and linearization remainder at time(s) ``t``.

    Returns ``(J, v)`` with shapes ``(d, d)`` and ``(d,)`` for scalar ``t``,
    or with a leading time axis for a vector of times.
    """
    scalar = np.ndim(t) == 0
    times = np.atleast_1d(np.asarray(t, dtype=float))
    parts = np.split(point.alpha_prev, np.cumsum([b.K for b in point.bases])[:-1])
    x = np.column_stack([design_matrix(b, times) @ a for b, a in zip(point.bases, parts)])
    jac = model.jac_x(times, x, theta)
    v = model.f(times, x, theta) - np.einsum("njk,nk->nj", jac, x)
    if scalar:
        return jac[0], v[0]
    return jac, v


def assemble(model: OdeModel, theta, gamma, point: LinearizationPoint, rule: QuadratureRule) -> PenaltyAssembly:
    """One-off assembly; for repeated use build a :class:`Collocation` once."""
    return Collocation(point.bases, rule).assemble(model, theta, gamma, alpha_prev=point.alpha_prev)
