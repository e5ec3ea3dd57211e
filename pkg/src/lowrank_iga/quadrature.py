"""Gauss-Legendre rules on knot spans and univariate weighted matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import DomainError
from .splines import UnivariateSpline, basis_matrix


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Composite rule on [0, 1]: nodes and positive weights summing to 1."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.nodes.shape != self.weights.shape:
            raise DomainError("nodes and weights differ in length")

    def integrate(self, f: Callable) -> float:
        return float(np.dot(self.weights, f(self.nodes)))

    def __len__(self):
        return self.nodes.size


def gauss_legendre_per_span(spline: UnivariateSpline, nodes_per_span: int) -> QuadratureRule:
    """The ``m``-point Gauss-Legendre rule mapped onto every nonempty span."""
    if nodes_per_span < 1:
        raise DomainError("nodes_per_span must be at least 1")
    ref_x, ref_w = np.polynomial.legendre.leggauss(nodes_per_span)
    ref_x = 0.5 * (ref_x + 1.0)
    ref_w = 0.5 * ref_w
    nodes, weights = [], []
    for a, b in spline.spans():
        nodes.append(a + (b - a) * ref_x)
        weights.append((b - a) * ref_w)
    return QuadratureRule(np.concatenate(nodes), np.concatenate(weights))


def default_nodes_per_span(degree: int, weight_degree: int) -> int:
    """Smallest Gauss rule integrating ``spline * spline * weight`` exactly."""
    return max(1, math.ceil((2 * degree + weight_degree + 1) / 2))


def _weight_values(weight, nodes):
    if callable(weight):
        vals = np.asarray(weight(nodes), dtype=float)
    else:
        vals = np.asarray(weight, dtype=float)
    return np.broadcast_to(vals, nodes.shape)


def weighted_gram(left: np.ndarray, right: np.ndarray, wq: np.ndarray) -> np.ndarray:
    """``sum_q wq[q] left[q, i] right[q, j]``."""
    return (left * wq[:, None]).T @ right


def univariate_mass(trial: UnivariateSpline, test: UnivariateSpline, weight,
                    rule: QuadratureRule) -> np.ndarray:
    """Weighted univariate mass matrix ``int B_i B_j weight``.

    ``weight`` is a callable evaluated at the quadrature nodes (a constant
    is accepted as well).
    """
    x = rule.nodes
    wq = rule.weights * _weight_values(weight, x)
    return weighted_gram(basis_matrix(trial, x), basis_matrix(test, x), wq)


def univariate_stiffness_factor(spline: UnivariateSpline, k: int, l: int, d: int, weight,
                                rule: QuadratureRule) -> np.ndarray:
    """Factor ``d`` of the ``(k, l)`` stiffness term.

    Entry ``(i, j)`` is ``int (delta(l,d) B_i) (delta(k,d) B_j) weight`` where
    ``delta(m, d)`` differentiates iff ``m == d``.  Dimension indices are
    zero-based.
    """
    x = rule.nodes
    wq = rule.weights * _weight_values(weight, x)
    b0 = basis_matrix(spline, x)
    b1 = basis_matrix(spline, x, 1) if (k == d or l == d) else None
    left = b1 if l == d else b0
    right = b1 if k == d else b0
    return weighted_gram(left, right, wq)
