"""Difference-penalty P-spline smoother used to initialise the spline coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bspline import BSplineBasis, design_matrix
from .errors import NumericalError

__all__ = ["PSplineFit", "psmooth"]


@dataclass
class PSplineFit:
    alpha: np.ndarray
    lam: float
    ed: float
    sigma2: float
    iterations: int


def psmooth(basis: BSplineBasis, t, y, diff_order: int = 2, lam: float = 1.0,
            tol: float = 1e-6, max_iter: int = 200) -> PSplineFit:
    """P-spline fit with the smoothing weight chosen by Schall's iteration.

    The variance ratio ``lam = sigma2 / sigma2_pen`` is refreshed from
    ``sigma2 = RSS / (n - ED)`` and ``sigma2_pen = |D alpha|^2 / (ED - diff_order)``.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    B = design_matrix(basis, t)
    D = np.diff(np.eye(basis.K), n=diff_order, axis=0)
    BtB = B.T @ B
    Bty = B.T @ y
    P = D.T @ D
    n = y.size
    it = 0
    for it in range(1, max_iter + 1):
        A = BtB + lam * P
        try:
            alpha = np.linalg.solve(A, Bty)
            ed = float(np.trace(np.linalg.solve(A, BtB)))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"P-spline system is singular: {exc}") from None
        rss = float(np.sum((y - B @ alpha) ** 2))
        sigma2 = rss / max(n - ed, 1e-8)
        pen = float(np.sum((D @ alpha) ** 2))
        sigma2_pen = pen / max(ed - diff_order, 1e-8)
        if sigma2_pen <= 0 or sigma2 <= 0:
            break
        new = sigma2 / sigma2_pen
        new = min(max(new, 1e-10), 1e12)
        done = abs(new - lam) <= tol * lam
        lam = new
        if done:
            break
    return PSplineFit(alpha=alpha, lam=lam, ed=ed, sigma2=sigma2, iterations=it)
