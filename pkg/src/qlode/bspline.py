"""B-spline bases on equidistant knots.

A basis of ``order`` m (degree m - 1) on ``[0, T]`` with ``n_internal``
equidistant internal knots has ``K = n_internal + m`` functions.  Boundary
knots are repeated ``m`` times.  Values come from the Cox-de Boor triangle,
first derivatives from the order-lowering difference formula.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DomainError

__all__ = ["BSplineBasis", "build_basis", "eval_basis", "design_matrix", "local_basis"]

# relative slack for times that are numerically on the boundary
_EDGE_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class BSplineBasis:
    order: int
    T: float
    n_internal: int
    knots: np.ndarray = field(repr=False)

    @property
    def K(self) -> int:
        return self.n_internal + self.order

    @property
    def degree(self) -> int:
        return self.order - 1

    @property
    def domain(self) -> tuple[float, float]:
        return (0.0, self.T)

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot values, i.e. the piecewise-polynomial breakpoints."""
        return self.knots[self.order - 1 : self.K + 1]

    def __eq__(self, other):
        if not isinstance(other, BSplineBasis):
            return NotImplemented
        return (
            self.order == other.order
            and self.T == other.T
            and self.n_internal == other.n_internal
        )

    def __hash__(self):
        return hash((self.order, self.T, self.n_internal))


def build_basis(domain, n_internal: int, order: int = 4) -> BSplineBasis:
    """Open uniform knot vector on ``domain = (0, T)``.

    Parameters
    ----------
    domain : tuple of float or float
        ``(0, T)`` or just ``T``.
    n_internal : int
        Number of equidistant internal knots.
    order : int
        Polynomial degree + 1; cubic splines have order 4.
    """
    if np.ndim(domain) == 0:
        lo, hi = 0.0, float(domain)
    else:
        lo, hi = (float(v) for v in domain)
    if lo != 0.0:
        raise ConfigurationError(f"domain must start at 0, got {lo}")
    if not np.isfinite(hi) or hi <= 0:
        raise ConfigurationError(f"domain length must be positive, got {hi}")
    if int(order) != order or order < 2:
        raise ConfigurationError(f"order must be an integer >= 2, got {order}")
    if int(n_internal) != n_internal or n_internal < 1:
        raise ConfigurationError(f"n_internal must be an integer >= 1, got {n_internal}")
    order, n_internal = int(order), int(n_internal)
    inner = np.linspace(0.0, hi, n_internal + 2)
    knots = np.concatenate([np.zeros(order - 1), inner, np.full(order - 1, hi)])
    knots.setflags(write=False)
    return BSplineBasis(order=order, T=hi, n_internal=n_internal, knots=knots)


def _check_times(basis: BSplineBasis, t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    slack = _EDGE_SLACK * basis.T
    bad = ~np.isfinite(t) | (t < -slack) | (t > basis.T + slack)
    if np.any(bad):
        raise DomainError(
            f"time {t[bad][0]!r} outside the basis domain [0, {basis.T}]"
        )
    return np.clip(t, 0.0, basis.T)


def _spans(basis: BSplineBasis, t: np.ndarray) -> np.ndarray:
    # index mu with knots[mu] <= t < knots[mu + 1]; t = T takes the last span
    mu = np.searchsorted(basis.knots, t, side="right") - 1
    return np.clip(mu, basis.order - 1, basis.K - 1)


def _triangle(knots: np.ndarray, order: int, t: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Nonzero basis values of the given order, shape (len(t), order)."""
    n = t.shape[0]
    vals = np.zeros((n, order))
    vals[:, 0] = 1.0
    left = np.empty((n, order))
    right = np.empty((n, order))
    for j in range(1, order):
        left[:, j] = t - knots[mu + 1 - j]
        right[:, j] = knots[mu + j] - t
        saved = np.zeros(n)
        for r in range(j):
            temp = vals[:, r] / (right[:, r + 1] + left[:, j - r])
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved
    return vals


def _local(basis: BSplineBasis, t: np.ndarray, deriv: int):
    if deriv not in (0, 1):
        raise ConfigurationError(f"deriv must be 0 or 1, got {deriv}")
    m, knots = basis.order, basis.knots
    mu = _spans(basis, t)
    first = mu - m + 1
    if deriv == 0:
        return _triangle(knots, m, t, mu), first

    p = m - 1
    lower = np.zeros((t.shape[0], m + 1))
    lower[:, 1:m] = _triangle(knots, m - 1, t, mu)
    out = np.empty((t.shape[0], m))
    for a in range(m):
        i = first + a
        d1 = knots[i + p] - knots[i]
        d2 = knots[i + p + 1] - knots[i + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            term1 = np.where(d1 > 0, lower[:, a] / d1, 0.0)
            term2 = np.where(d2 > 0, lower[:, a + 1] / d2, 0.0)
        out[:, a] = p * (term1 - term2)
    return out, first


def local_basis(basis: BSplineBasis, times, deriv: int = 0):
    """Compact form: the ``order`` possibly-nonzero values per time and the
    index of the first of them, shapes ``(n, order)`` and ``(n,)``."""
    t = _check_times(basis, np.asarray(times, dtype=float).reshape(-1))
    return _local(basis, t, deriv)


def eval_basis(basis: BSplineBasis, t: float, deriv: int = 0) -> np.ndarray:
    """All K basis functions (or their first derivatives) at a single time."""
    tt = _check_times(basis, t)
    if tt.shape != (1,):
        raise ConfigurationError("eval_basis takes a scalar time; use design_matrix")
    vals, first = _local(basis, tt, deriv)
    out = np.zeros(basis.K)
    out[first[0] : first[0] + basis.order] = vals[0]
    return out


def design_matrix(basis: BSplineBasis, times, deriv: int = 0, sparse: bool = False):
    """Matrix whose row i is ``eval_basis(basis, times[i], deriv)``.

    With ``sparse=True`` a CSR matrix is returned instead of a dense array.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    if times.size == 0:
        return sp.csr_matrix((0, basis.K)) if sparse else np.zeros((0, basis.K))
    t = _check_times(basis, times)
    vals, first = _local(basis, t, deriv)
    n, m = vals.shape
    rows = np.repeat(np.arange(n), m)
    cols = (first[:, None] + np.arange(m)).reshape(-1)
    mat = sp.csr_matrix((vals.reshape(-1), (rows, cols)), shape=(n, basis.K))
    return mat if sparse else mat.toarray()
