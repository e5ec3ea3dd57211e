"""B-spline and NURBS machinery on the unit cube.

Univariate bases are described by :class:`UnivariateSpline` (an open knot
vector with a degree).  Tensor-product bases are :class:`TensorSpace`
instances, and a :class:`GeometryMap` maps ``[0,1]^D`` onto a physical
domain.  All evaluation routines are vectorized over points; the scalar
functions (``eval_basis_all``, ``geometry_eval``, ...) are thin wrappers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import DomainError, SingularJacobianError, ValidationError


@dataclass(frozen=True, eq=False)
class UnivariateSpline:
    """Univariate B-spline basis over an open knot vector.

    Args:
        knots: nondecreasing knots in [0, 1] whose first and last ``degree+1``
            entries equal 0 and 1 respectively.
        degree: the polynomial degree ``p``.
    """

    knots: np.ndarray
    degree: int

    def __post_init__(self):
        kv = np.asarray(self.knots, dtype=float).copy()
        kv.setflags(write=False)
        object.__setattr__(self, "knots", kv)
        p = int(self.degree)
        object.__setattr__(self, "degree", p)
        if p < 0:
            raise ValidationError("degree must be nonnegative, got %d" % p)
        if kv.ndim != 1 or kv.size < 2 * (p + 1):
            raise ValidationError("knot vector too short for degree %d" % p)
        if np.any(np.diff(kv) < 0):
            raise ValidationError("knots must be nondecreasing")
        if not (np.all(kv[: p + 1] == 0.0) and np.all(kv[-(p + 1):] == 1.0)):
            raise ValidationError(
                "knot vector is not open: first/last %d knots must be 0/1" % (p + 1))
        interior = kv[p + 1: kv.size - p - 1]
        if interior.size:
            if interior[0] <= 0.0 or interior[-1] >= 1.0:
                raise ValidationError("interior knots must lie strictly inside (0, 1)")
            _, counts = np.unique(interior, return_counts=True)
            if counts.max() > p:
                raise ValidationError(
                    "interior knot multiplicity %d exceeds degree %d" % (counts.max(), p))

    @property
    def n(self) -> int:
        """Number of basis functions."""
        return self.knots.size - self.degree - 1

    @property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    @property
    def num_spans(self) -> int:
        return self.breakpoints.size - 1

    def spans(self):
        """List of nonempty knot spans as ``(a, b)`` pairs."""
        bp = self.breakpoints
        return list(zip(bp[:-1], bp[1:]))

    def multiplicity(self, t: float) -> int:
        return int(np.sum(self.knots == t))

    def __eq__(self, other):
        return (isinstance(other, UnivariateSpline) and self.degree == other.degree
                and self.knots.shape == other.knots.shape
                and np.array_equal(self.knots, other.knots))

    def __hash__(self):
        return hash((self.degree, self.knots.tobytes()))

    def __repr__(self):
        return "UnivariateSpline(p=%d, n=%d, spans=%d)" % (self.degree, self.n, self.num_spans)


# Alias matching the usual terminology: a knot vector together with its degree.
KnotVector = UnivariateSpline


def make_spline(degree: int, interior=(), multiplicity: int = 1) -> UnivariateSpline:
    """Open knot vector on [0, 1] with the given interior breakpoints."""
    interior = np.repeat(np.asarray(interior, dtype=float), multiplicity)
    knots = np.concatenate([np.zeros(degree + 1), np.sort(interior), np.ones(degree + 1)])
    return UnivariateSpline(knots, degree)


def find_span(spline: UnivariateSpline, x) -> np.ndarray:
    """Knot index ``s`` with ``knots[s] <= x < knots[s+1]`` (right endpoint closed)."""
    x = np.asarray(x, dtype=float)
    kv = spline.knots
    s = np.searchsorted(kv, x, side="right") - 1
    return np.minimum(s, spline.n - 1)


def _basis_table(knots, p, x, spans, order):
    """All ``n`` basis functions (or their ``order``-th derivatives) at points x.

    ``spans[q]`` selects which degree-0 indicator is active for point ``x[q]``;
    passing the left neighbouring span gives left limits at breakpoints.
    """
    m = x.size
    nk = knots.size
    table = np.zeros((m, nk - 1))
    table[np.arange(m), spans] = 1.0
    levels = [table]
    for j in range(1, p + 1):
        prev = levels[-1]
        cnt = nk - 1 - j
        left_den = knots[j:j + cnt] - knots[:cnt]
        right_den = knots[j + 1:j + 1 + cnt] - knots[1:1 + cnt]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(left_den > 0, (x[:, None] - knots[None, :cnt]) / left_den, 0.0)
            b = np.where(right_den > 0, (knots[None, j + 1:j + 1 + cnt] - x[:, None]) / right_den, 0.0)
        levels.append(a * prev[:, :cnt] + b * prev[:, 1:cnt + 1])

    def deriv(j, k):
        if k == 0:
            return levels[j]
        lower = deriv(j - 1, k - 1)
        cnt = nk - 1 - j
        left_den = knots[j:j + cnt] - knots[:cnt]
        right_den = knots[j + 1:j + 1 + cnt] - knots[1:1 + cnt]
        with np.errstate(divide="ignore", invalid="ignore"):
            cl = np.where(left_den > 0, j / left_den, 0.0)
            cr = np.where(right_den > 0, j / right_den, 0.0)
        return cl * lower[:, :cnt] - cr * lower[:, 1:cnt + 1]

    return deriv(p, order)


def basis_matrix(spline: UnivariateSpline, x, order: int = 0) -> np.ndarray:
    """Matrix of shape ``(len(x), n)`` of basis values or derivatives.

    Raises:
        DomainError: if some point lies outside [0, 1].
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1:
        x = x.ravel()
    if np.any(x < 0.0) or np.any(x > 1.0) or np.any(~np.isfinite(x)):
        bad = x[(x < 0.0) | (x > 1.0) | ~np.isfinite(x)][0]
        raise DomainError("evaluation point %r outside [0, 1]" % bad)
    p = spline.degree
    if order > p:
        warnings.warn("derivative order %d exceeds degree %d; result is zero" % (order, p),
                      stacklevel=2)
        return np.zeros((x.size, spline.n))
    return _basis_table(spline.knots, p, x, find_span(spline, x), order)


def eval_basis_all(spline: UnivariateSpline, x: float) -> np.ndarray:
    """Values of all ``n`` basis functions at a single point ``x``."""
    return basis_matrix(spline, [x])[0]


def eval_basis_deriv(spline: UnivariateSpline, x: float, order: int) -> np.ndarray:
    """``order``-th derivatives of all basis functions at a single point ``x``."""
    if order < 0:
        raise DomainError("derivative order must be nonnegative")
    return basis_matrix(spline, [x], order)[0]


def refine_knots(spline: UnivariateSpline, k: int) -> UnivariateSpline:
    """Insert ``k`` equispaced knots strictly inside every nonempty span."""
    if k < 0:
        raise DomainError("number of inserted knots must be nonnegative")
    if k == 0:
        return spline
    frac = np.arange(1, k + 1) / (k + 1)
    new = [a + (b - a) * frac for a, b in spline.spans()]
    knots = np.sort(np.concatenate([spline.knots] + new))
    return UnivariateSpline(knots, spline.degree)


def greville_abscissae(spline: UnivariateSpline) -> np.ndarray:
    """Knot averages ``mean(knots[i+1:i+p+1])`` for every basis function.

    Raises:
        ValidationError: if two abscissae coincide (singular collocation).
    """
    p, kv = spline.degree, spline.knots
    if p == 0:
        g = 0.5 * (kv[:-1] + kv[1:])
    else:
        csum = np.concatenate([[0.0], np.cumsum(kv)])
        g = (csum[p + 1:p + 1 + spline.n] - csum[1:1 + spline.n]) / p
    g = np.clip(g, 0.0, 1.0)
    if np.any(np.diff(g) <= 0):
        raise ValidationError("duplicate Greville abscissae: collocation matrix is singular")
    return g


@dataclass(frozen=True, eq=False)
class TensorSpace:
    """Tensor product of univariate spline spaces."""

    factors: tuple

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise ValidationError("tensor space needs at least one factor")

    @property
    def dim(self) -> int:
        return len(self.factors)

    @property
    def dims(self) -> tuple:
        return tuple(f.n for f in self.factors)

    @property
    def degrees(self) -> tuple:
        return tuple(f.degree for f in self.factors)

    def refine(self, k: int) -> "TensorSpace":
        return TensorSpace(tuple(refine_knots(f, k) for f in self.factors))


def mode_product(tensor: np.ndarray, mats: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    """Multiply the leading ``len(mats)`` axes of ``tensor`` by matrices.

    ``mats[d]`` has shape ``(m_d, n_d)`` and acts on axis ``d``; ``None``
    leaves the axis untouched.  Trailing axes are carried along.
    """
    out = tensor
    for d, mat in enumerate(mats):
        if mat is None:
            continue
        out = np.moveaxis(np.tensordot(mat, out, axes=(1, d)), 0, d)
    return out


@dataclass(frozen=True, eq=False)
class GeometryMap:
    """Spline (or NURBS, if ``weights`` is given) map from ``[0,1]^D``.

    Args:
        space: tensor-product spline space of the map.
        control_points: array of shape ``(n_1, ..., n_D, D)``.
        weights: optional positive array of shape ``(n_1, ..., n_D)``.
    """

    space: TensorSpace
    control_points: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        cp = np.array(self.control_points, dtype=float)
        D = self.space.dim
        if cp.shape != self.space.dims + (D,):
            raise ValidationError("control point array has shape %s, expected %s"
                                  % (cp.shape, self.space.dims + (D,)))
        cp.setflags(write=False)
        object.__setattr__(self, "control_points", cp)
        if self.weights is not None:
            w = np.array(self.weights, dtype=float)
            if w.shape != self.space.dims:
                raise ValidationError("weights have shape %s, expected %s"
                                      % (w.shape, self.space.dims))
            if not np.all(w > 0):
                raise ValidationError("NURBS weights must be strictly positive")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def is_rational(self) -> bool:
        return self.weights is not None

    def homogeneous(self):
        """Control points multiplied by weights, and the weights (or None)."""
        if self.weights is None:
            return self.control_points, None
        return self.control_points * self.weights[..., None], self.weights

    def grid(self, points: Sequence, derivatives: bool = True):
        """Evaluate the map (and its Jacobian) on a tensor grid.

        Args:
            points: ``D`` one-dimensional arrays of parameter values.

        Returns:
            ``(values, jac)`` with shapes ``(m_1,...,m_D, D)`` and
            ``(m_1,...,m_D, D, D)``; ``jac[..., i, j] = dG_i/dx_j``.
            ``jac`` is ``None`` if ``derivatives`` is false.
        """
        D = self.dim
        if len(points) != D:
            raise DomainError("expected %d coordinate arrays, got %d" % (D, len(points)))
        vals = [basis_matrix(f, x) for f, x in zip(self.space.factors, points)]
        ders = [basis_matrix(f, x, 1) if f.degree >= 1 else np.zeros((np.size(x), f.n))
                for f, x in zip(self.space.factors, points)] if derivatives else None
        num, w = self.homogeneous()
        N = mode_product(num, vals)
        if w is not None:
            W = mode_product(w, vals)
            G = N / W[..., None]
        else:
            G = N
        if not derivatives:
            return G, None
        cols = []
        for j in range(D):
            mats = [ders[d] if d == j else vals[d] for d in range(D)]
            dN = mode_product(num, mats)
            if w is not None:
                dW = mode_product(w, mats)
                dN = (dN - G * dW[..., None]) / W[..., None]
            cols.append(dN)
        jac = np.stack(cols, axis=-1)
        return G, jac


def eval_points(geo: GeometryMap, points, derivatives: bool = True):
    """Evaluate the map and its Jacobian at scattered points of shape ``(m, D)``.

    Returns ``(values, jac)`` with shapes ``(m, D)`` and ``(m, D, D)``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    D = geo.dim
    if points.shape[1] != D:
        raise DomainError("points must have %d columns" % D)
    facs = geo.space.factors
    vals = [basis_matrix(f, points[:, d]) for d, f in enumerate(facs)]
    ders = [basis_matrix(f, points[:, d], 1) if f.degree >= 1 else np.zeros_like(vals[d])
            for d, f in enumerate(facs)] if derivatives else None
    num, w = geo.homogeneous()
    data = num if w is None else np.concatenate([num, w[..., None]], axis=-1)

    def contract(mats):
        t = np.tensordot(mats[0], data, axes=(1, 0))
        for m in mats[1:]:
            t = np.einsum("qb,qb...->q...", m, t)
        return t

    h = contract(vals)
    G = h if w is None else h[:, :D] / h[:, D:]
    if not derivatives:
        return G, None
    cols = []
    for j in range(D):
        dh = contract([ders[d] if d == j else vals[d] for d in range(D)])
        if w is None:
            cols.append(dh)
        else:
            cols.append((dh[:, :D] - G * dh[:, D:]) / h[:, D:])
    return G, np.stack(cols, axis=-1)


def _as_point(geo: GeometryMap, xhat) -> list:
    xhat = np.asarray(xhat, dtype=float).ravel()
    if xhat.size != geo.dim:
        raise DomainError("point has %d coordinates, geometry is %d-dimensional"
                          % (xhat.size, geo.dim))
    return [np.array([v]) for v in xhat]


def geometry_eval(geo: GeometryMap, xhat) -> np.ndarray:
    """Physical point ``G(xhat)``."""
    G, _ = geo.grid(_as_point(geo, xhat), derivatives=False)
    return G.reshape(geo.dim)


def geometry_jacobian(geo: GeometryMap, xhat) -> np.ndarray:
    """Jacobian matrix whose column ``d`` is ``dG/dxhat_d``."""
    _, J = geo.grid(_as_point(geo, xhat))
    return J.reshape(geo.dim, geo.dim)


def omega_from_jacobian(jac: np.ndarray) -> np.ndarray:
    return np.abs(np.linalg.det(jac))


def q_from_jacobian(jac: np.ndarray, points=None) -> np.ndarray:
    """``(J^T J)^{-1} |det J|`` for a stack of Jacobians.

    Raises:
        SingularJacobianError: carrying the first offending parameter point
            when ``points`` (the grid coordinate arrays) is provided.
    """
    det = np.linalg.det(jac)
    scale = np.max(np.abs(jac), axis=(-2, -1)) ** jac.shape[-1]
    bad = np.abs(det) <= 1e-13 * np.maximum(scale, np.finfo(float).tiny)
    if np.any(bad):
        idx = np.unravel_index(np.argmax(bad), bad.shape)
        if points is not None and len(idx) == len(points):
            pt = [points[d][i] for d, i in enumerate(idx)]
        else:
            pt = idx
        raise SingularJacobianError(pt)
    jtj = np.swapaxes(jac, -1, -2) @ jac
    q = np.linalg.inv(jtj) * np.abs(det)[..., None, None]
    return 0.5 * (q + np.swapaxes(q, -1, -2))


def weight_omega(geo: GeometryMap, xhat) -> float:
    """Absolute Jacobian determinant ``|det grad G(xhat)|``."""
    return float(omega_from_jacobian(geometry_jacobian(geo, xhat)))


def weight_q(geo: GeometryMap, xhat) -> np.ndarray:
    """Scaled inverse metric ``(grad G^T grad G)^{-1} |det grad G|`` at ``xhat``."""
    pts = _as_point(geo, xhat)
    _, J = geo.grid(pts)
    return q_from_jacobian(J, pts).reshape(geo.dim, geo.dim)


def omega_grid(geo: GeometryMap, points) -> np.ndarray:
    _, J = geo.grid(points)
    return omega_from_jacobian(J)


def q_grid(geo: GeometryMap, points) -> np.ndarray:
    _, J = geo.grid(points)
    return q_from_jacobian(J, points)


def knot_insertion_matrix(old: UnivariateSpline, new: UnivariateSpline) -> np.ndarray:
    """Matrix ``T`` with ``B_old(x) = B_new(x) @ T`` for a refined space ``new``.

    Computed by collocation at the Greville points of ``new``, which is exact
    whenever ``old`` is a subspace of ``new``.
    """
    x = greville_abscissae(new)
    return np.linalg.solve(basis_matrix(new, x), basis_matrix(old, x))


def refine_geometry(geo: GeometryMap, k: int) -> GeometryMap:
    """Same map expressed on the space refined by ``refine_knots(., k)``."""
    if k == 0:
        return geo
    new_space = geo.space.refine(k)
    mats = [knot_insertion_matrix(o, n) for o, n in zip(geo.space.factors, new_space.factors)]
    num, w = geo.homogeneous()
    num = mode_product(num, mats)
    if w is None:
        return GeometryMap(new_space, num)
    w = mode_product(w, mats)
    return GeometryMap(new_space, num / w[..., None], w)


def breakpoint_continuity(geo: GeometryMap, d: int) -> list:
    """Continuity order of the map across each interior breakpoint in direction ``d``.

    Returns one entry per interior breakpoint: the largest ``c`` such that all
    derivatives up to order ``c`` in ``x_d`` are continuous there (homogeneous
    coordinates for NURBS), or ``inf`` if the two neighbouring polynomial
    pieces coincide.
    """
    spline = geo.space.factors[d]
    p, kv = spline.degree, spline.knots
    num, w = geo.homogeneous()
    data = num if w is None else np.concatenate([num, w[..., None]], axis=-1)
    data = np.moveaxis(data, d, 0).reshape(spline.n, -1)
    scale = max(np.max(np.abs(data)), np.finfo(float).tiny)
    out = []
    for t in spline.breakpoints[1:-1]:
        right = np.searchsorted(kv, t, side="right") - 1
        left = np.searchsorted(kv, t, side="left") - 1
        cont = np.inf
        for order in range(p + 1):
            bl = _basis_table(kv, p, np.array([t]), np.array([left]), order)[0]
            br = _basis_table(kv, p, np.array([t]), np.array([right]), order)[0]
            jump = (br - bl) @ data
            ref = max(np.max(np.abs(bl @ data)), np.max(np.abs(br @ data)), scale)
            if np.max(np.abs(jump)) > 1e-9 * ref:
                cont = order - 1
                break
        out.append(cont)
    return out
