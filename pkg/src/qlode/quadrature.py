"""Composite Gauss-Legendre rules aligned with spline knot spans."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bspline import BSplineBasis
from .errors import ConfigurationError, NumericalError

__all__ = ["QuadratureRule", "build_rule", "rule_from_breakpoints", "integrate"]

DEFAULT_PER_SPAN = 5


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    per_span: int

    @property
    def size(self) -> int:
        return self.nodes.shape[0]


def rule_from_breakpoints(breakpoints, per_span: int = DEFAULT_PER_SPAN) -> QuadratureRule:
    """Gauss-Legendre with ``per_span`` points on every nonempty interval."""
    if int(per_span) != per_span or per_span < 2:
        raise ConfigurationError(f"per_span must be an integer >= 2, got {per_span}")
    per_span = int(per_span)
    edges = np.unique(np.asarray(breakpoints, dtype=float))
    a, b = edges[:-1], edges[1:]
    keep = b > a
    a, b = a[keep], b[keep]
    x, w = np.polynomial.legendre.leggauss(per_span)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = (mid[:, None] + half[:, None] * x[None, :]).reshape(-1)
    weights = (half[:, None] * w[None, :]).reshape(-1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(nodes=nodes, weights=weights, per_span=per_span)


def build_rule(basis, per_span: int = DEFAULT_PER_SPAN) -> QuadratureRule:
    """Rule on the knot spans of one basis, or on the union of several."""
    bases = [basis] if isinstance(basis, BSplineBasis) else list(basis)
    if not bases:
        raise ConfigurationError("at least one basis is required")
    if len({b.T for b in bases}) != 1:
        raise ConfigurationError("all bases must share the same domain")
    edges = np.concatenate([b.breakpoints for b in bases])
    return rule_from_breakpoints(edges, per_span)


def integrate(rule: QuadratureRule, f) -> float:
    """Weighted sum of ``f`` over the rule nodes.

    ``f`` is called once with the full node vector and must return one value
    per node (a scalar callable is accepted and applied element-wise).
    """
    try:
        vals = np.asarray(f(rule.nodes), dtype=float)
        if vals.shape != rule.nodes.shape:
            raise ValueError
    except (TypeError, ValueError):
        vals = np.array([float(f(t)) for t in rule.nodes])
    bad = ~np.isfinite(vals)
    if np.any(bad):
        t_bad = rule.nodes[np.argmax(bad)]
        raise NumericalError(f"integrand is not finite at t = {t_bad!r}")
    return float(np.dot(rule.weights, vals))
