"""Derivative-free simplex search used for the ODE-parameter update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SimplexResult", "nelder_mead"]


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    nfev: int
    converged: bool


def _safe(fun, x):
    try:
        val = float(fun(x))
    except (ArithmeticError, ValueError):
        return np.inf
    return val if np.isfinite(val) else np.inf


def nelder_mead(fun, x0, step=None, xtol: float = 1e-6, max_fev: int | None = None,
                reflect: float = 1.0, expand: float = 2.0, contract: float = 0.5,
                shrink: float = 0.5) -> SimplexResult:
    """Minimize ``fun`` with the Nelder-Mead simplex.

    Non-finite values (or arithmetic errors raised by ``fun``) count as
    ``+inf`` so the corresponding trial point is rejected.  Stops when the
    simplex diameter (max-norm distance of every vertex to the best one)
    drops below ``xtol``.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    n = x0.size
    if max_fev is None:
        max_fev = 200 * n + 100
    if step is None:
        step = np.where(x0 != 0, 0.05 * np.abs(x0), 2.5e-4)
    step = np.broadcast_to(np.asarray(step, dtype=float), (n,))

    sim = np.vstack([x0, x0 + np.diag(step)])
    fs = np.array([_safe(fun, v) for v in sim])
    nfev = n + 1
    converged = False
    while True:
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
        if np.max(np.abs(sim[1:] - sim[0])) < xtol:
            converged = True
            break
        if nfev >= max_fev:
            break
        centroid = sim[:-1].mean(axis=0)
        xr = centroid + reflect * (centroid - sim[-1])
        fr = _safe(fun, xr)
        nfev += 1
        if fr < fs[0]:
            xe = centroid + expand * (xr - centroid)
            fe = _safe(fun, xe)
            nfev += 1
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-1]:
            xc = centroid + contract * (xr - centroid)
        else:
            xc = centroid + contract * (sim[-1] - centroid)
        fc = _safe(fun, xc)
        nfev += 1
        if fc < min(fr, fs[-1]):
            sim[-1], fs[-1] = xc, fc
            continue
        sim[1:] = sim[0] + shrink * (sim[1:] - sim[0])
        fs[1:] = [_safe(fun, v) for v in sim[1:]]
        nfev += n
    return SimplexResult(x=sim[0].copy(), fun=float(fs[0]), nfev=nfev, converged=converged)
