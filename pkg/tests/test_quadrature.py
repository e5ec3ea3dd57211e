import numpy as np
import pytest

from lowrank_iga.quadrature import (default_nodes_per_span, gauss_legendre_per_span,
                                    univariate_mass, univariate_stiffness_factor)
from lowrank_iga.splines import basis_matrix, make_spline, refine_knots


def test_midpoint_rule():
    r = gauss_legendre_per_span(make_spline(1), 1)
    np.testing.assert_allclose(r.nodes, [0.5])
    np.testing.assert_allclose(r.weights, [1.0])


def test_two_point_rule():
    r = gauss_legendre_per_span(make_spline(1), 2)
    np.testing.assert_allclose(r.nodes, [0.5 - 1 / (2 * np.sqrt(3)), 0.5 + 1 / (2 * np.sqrt(3))])
    np.testing.assert_allclose(r.weights, [0.5, 0.5])
    assert r.integrate(lambda x: x ** 3) == pytest.approx(0.25, abs=1e-16)


@pytest.mark.parametrize("m", [1, 3, 5, 6])
def test_exactness_per_span(m):
    r = gauss_legendre_per_span(make_spline(2, [0.2, 0.55, 0.9]), m)
    assert r.weights.sum() == pytest.approx(1.0, abs=1e-15)
    for deg in range(2 * m):
        assert abs(r.integrate(lambda x: x ** deg) - 1 / (deg + 1)) <= 1e-14


def test_default_nodes():
    assert default_nodes_per_span(2, 7) == 6


def test_linear_mass():
    s = make_spline(1)
    M = univariate_mass(s, s, 1.0, gauss_legendre_per_span(s, 2))
    np.testing.assert_allclose(M, [[1 / 3, 1 / 6], [1 / 6, 1 / 3]], atol=1e-15)


def test_zero_weight():
    s = make_spline(2, [0.5])
    assert not np.any(univariate_mass(s, s, 0.0, gauss_legendre_per_span(s, 3)))


def test_mass_against_direct_integration():
    s = refine_knots(make_spline(2), 3)
    M = univariate_mass(s, s, 1.0, gauss_legendre_per_span(s, 3))
    # independent oracle: high-order composite rule on a fine uniform grid of the spans
    x, w = np.polynomial.legendre.leggauss(10)
    ref = np.zeros_like(M)
    for a, b in s.spans():
        xs = a + (b - a) * (x + 1) / 2
        B = basis_matrix(s, xs)
        ref += (B * (w * (b - a) / 2)[:, None]).T @ B
    np.testing.assert_allclose(M, ref, atol=1e-14)


def test_mass_spd_and_banded():
    s = refine_knots(make_spline(3), 4)
    M = univariate_mass(s, s, lambda x: 1 + x ** 2, gauss_legendre_per_span(s, 5))
    assert np.linalg.eigvalsh(M).min() > 0
    i, j = np.indices(M.shape)
    assert np.all(M[np.abs(i - j) > s.degree] == 0.0)


def test_laplacian_element():
    s = make_spline(1)
    K = univariate_stiffness_factor(s, 0, 0, 0, 1.0, gauss_legendre_per_span(s, 2))
    np.testing.assert_allclose(K, [[1, -1], [-1, 1]], atol=1e-14)


def test_no_derivative_factor_is_mass():
    s = refine_knots(make_spline(2), 2)
    r = gauss_legendre_per_span(s, 4)
    wt = lambda x: 2 + np.sin(x)
    np.testing.assert_allclose(univariate_stiffness_factor(s, 1, 2, 0, wt, r), univariate_mass(s, s, wt, r))


@pytest.mark.parametrize("k,l,d", [(0, 1, 0), (0, 1, 1), (1, 2, 2), (0, 0, 0)])
def test_transpose_symmetry(k, l, d):
    s = make_spline(3, [0.3, 0.65])
    r = gauss_legendre_per_span(s, 5)
    wt = lambda x: np.exp(x)
    np.testing.assert_allclose(univariate_stiffness_factor(s, k, l, d, wt, r),
                               univariate_stiffness_factor(s, l, k, d, wt, r).T, atol=1e-14)
