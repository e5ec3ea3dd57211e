"""Low-rank assembly of IGA mass and stiffness matrices.

The geometry weights (``omega = |det grad G|`` and the scaled inverse metric
``Q``) are sampled on a Greville grid of a higher-degree spline space,
compressed with TT-SVD, and turned into interpolation coefficients by one
univariate collocation solve per dimension.  Every rank-one slice of the
coefficient train then yields one Kronecker product of univariate matrices.
A dense element-loop assembly serves as the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse

from .exceptions import DomainError, IllConditionedError, SizeCapError, ValidationError
from .quadrature import (QuadratureRule, default_nodes_per_span, gauss_legendre_per_span,
                         weighted_gram)
from .splines import (GeometryMap, TensorSpace, UnivariateSpline, basis_matrix,
                      breakpoint_continuity, eval_points, greville_abscissae, mode_product,
                      omega_from_jacobian, q_from_jacobian, refine_knots)
from .tt import KroneckerSum, TtTensor, tt_svd, tt_to_canonical_slices

DENSE_ROW_CAP = 200_000
COLLOCATION_COND_CAP = 1e12


@dataclass(frozen=True, eq=False)
class InterpolationSpace:
    """Spline space used to interpolate the geometry weights."""

    factors: tuple

    @property
    def dim(self) -> int:
        return len(self.factors)

    @property
    def dims(self) -> tuple:
        return tuple(f.n for f in self.factors)

    @property
    def degrees(self) -> tuple:
        return tuple(f.degree for f in self.factors)

    def points(self):
        """Per-dimension Greville abscissae (the interpolation grid)."""
        return [greville_abscissae(f) for f in self.factors]

    def collocation(self, d: int) -> np.ndarray:
        f = self.factors[d]
        return basis_matrix(f, greville_abscissae(f))


def build_interpolation_space(geo: GeometryMap, target: str = "mass",
                              degree_override: Optional[int] = None) -> InterpolationSpace:
    """Interpolation space for the weight functions of ``geo``.

    The default degree is ``D*p_d + 1`` in every direction, for both targets.
    Breakpoints are those of the solution space; at each breakpoint the knot
    multiplicity matches the smoothness of the weights there, which is one
    order less than that of the geometry map (capped to keep the space valid).
    """
    if target not in ("mass", "stiffness"):
        raise DomainError("target must be 'mass' or 'stiffness'")
    D = geo.dim
    factors = []
    for d, spl in enumerate(geo.space.factors):
        deg = D * spl.degree + 1 if degree_override is None else int(degree_override)
        if deg < spl.degree:
            raise ValidationError("interpolation degree %d below geometry degree %d"
                                  % (deg, spl.degree))
        interior = spl.breakpoints[1:-1]
        knots = [np.zeros(deg + 1)]
        for t, cont in zip(interior, breakpoint_continuity(geo, d)):
            mult = 1 if math.isinf(cont) else int(min(max(deg - (cont - 1), 1), deg))
            knots.append(np.full(mult, t))
        knots.append(np.ones(deg + 1))
        factors.append(UnivariateSpline(np.concatenate(knots), deg))
    return InterpolationSpace(tuple(factors))


def sample_all_weights(geo: GeometryMap, space: InterpolationSpace) -> dict:
    """``omega`` and every ``q[k, l]`` (k <= l) on the interpolation grid."""
    pts = space.points()
    _, jac = geo.grid(pts)
    q = q_from_jacobian(jac, pts)
    out = {"omega": omega_from_jacobian(jac)}
    D = geo.dim
    for k in range(D):
        for l in range(k, D):
            out[(k, l)] = np.ascontiguousarray(q[..., k, l])
    return out


def sample_weight_grid(geo: GeometryMap, space: InterpolationSpace, which) -> np.ndarray:
    """One weight function on the tensor Greville grid.

    Args:
        which: ``"omega"`` or a zero-based pair ``(k, l)`` selecting ``q[k, l]``.
    """
    pts = space.points()
    _, jac = geo.grid(pts)
    if which == "omega":
        return omega_from_jacobian(jac)
    k, l = which
    return q_from_jacobian(jac, pts)[..., k, l]


def _solve_collocation(space: InterpolationSpace, d: int, rhs: np.ndarray) -> np.ndarray:
    mat = space.collocation(d)
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > COLLOCATION_COND_CAP:
        raise IllConditionedError("collocation matrix of dimension %d has condition %.3g" % (d, cond))
    return scipy.linalg.lu_solve(scipy.linalg.lu_factor(mat), rhs)


def interpolate_weight_tt(samples: np.ndarray, space: InterpolationSpace, tol: float,
                          norm_ref: Optional[float] = None) -> TtTensor:
    """Coefficient train of the spline interpolant of gridded samples.

    The samples are compressed by TT-SVD first; then the mode fibers of every
    core are mapped through the inverse univariate collocation matrix.
    """
    if samples.shape != space.dims:
        raise DomainError("samples of shape %s do not match interpolation space %s"
                          % (samples.shape, space.dims))
    t = tt_svd(samples, tol, norm_ref=norm_ref)
    cores = []
    for d, c in enumerate(t.cores):
        r0, n, r1 = c.shape
        sol = _solve_collocation(space, d, np.moveaxis(c, 1, 0).reshape(n, r0 * r1))
        cores.append(np.moveaxis(sol.reshape(n, r0, r1), 0, 1))
    return TtTensor(cores)


def evaluate_interpolant(t: TtTensor, space: InterpolationSpace, points) -> np.ndarray:
    """Values of the spline with coefficient train ``t`` at scattered points.

    Args:
        points: array of shape ``(m, D)``.
    """
    points = np.atleast_2d(points)
    acc = np.ones((points.shape[0], 1))
    for d, c in enumerate(t.cores):
        b = basis_matrix(space.factors[d], points[:, d])
        slab = np.einsum("qn,rnR->qrR", b, c)
        acc = np.einsum("qr,qrR->qR", acc, slab)
    return acc[:, 0]


def _scattered(coeffs: np.ndarray, space: InterpolationSpace, points: np.ndarray) -> np.ndarray:
    mats = [basis_matrix(f, points[:, d]) for d, f in enumerate(space.factors)]
    t = np.tensordot(mats[0], coeffs, axes=(1, 0))
    for m in mats[1:]:
        t = np.einsum("qb,qb...->q...", m, t)
    return t


def interpolation_residual(geo: GeometryMap, space: InterpolationSpace, samples: Optional[dict] = None,
                           points: Optional[np.ndarray] = None, seed: int = 0) -> dict:
    """Off-grid error of the untruncated weight interpolants.

    Returns ``{"omega": e_omega, "q": e_q}``: maximal absolute errors at the
    probe points relative to ``max|omega|`` and ``max ||Q||_F`` respectively.
    """
    samples = sample_all_weights(geo, space) if samples is None else samples
    if points is None:
        points = np.random.default_rng(seed).random((256, geo.dim))
    _, jac = eval_points(geo, points)
    om = omega_from_jacobian(jac)
    q = q_from_jacobian(jac, None)
    inv = [np.linalg.inv(space.collocation(d)) for d in range(space.dim)]

    def approx(key):
        return _scattered(mode_product(samples[key], inv), space, points)

    e_om = np.max(np.abs(approx("omega") - om)) / max(np.max(np.abs(om)), np.finfo(float).tiny)
    qscale = max(np.max(np.linalg.norm(q, axis=(-2, -1))), np.finfo(float).tiny)
    e_q = 0.0
    for (k, l) in [key for key in samples if key != "omega"]:
        e_q = max(e_q, np.max(np.abs(approx((k, l)) - q[:, k, l])) / qscale)
    return {"omega": float(e_om), "q": float(e_q)}


def adapt_interpolation_space(geo: GeometryMap, space: InterpolationSpace, tol: float,
                              max_refinements: int = 8, safety: float = 0.1) -> InterpolationSpace:
    """Bisect the interpolation spans until the off-grid residual is below ``safety*tol``.

    Polynomial weights are reproduced exactly and return immediately; rational
    ones (NURBS maps, and ``Q`` in general) converge with the span size.
    """
    for _ in range(max_refinements):
        res = interpolation_residual(geo, space)
        if max(res.values()) <= safety * tol:
            break
        space = InterpolationSpace(tuple(refine_knots(f, 1) for f in space.factors))
    return space


@dataclass
class WeightTT:
    """Coefficient trains of ``omega`` and of the upper triangle of ``Q``."""

    omega: TtTensor
    q: Dict[Tuple[int, int], TtTensor]
    space: InterpolationSpace

    def q_entry(self, k: int, l: int) -> TtTensor:
        return self.q[(min(k, l), max(k, l))]

    def rank_table(self) -> dict:
        """``{name: ranks}`` with names ``q_11``... (one-based) and ``omega``."""
        out = {"q_%d%d" % (k + 1, l + 1): t.ranks for (k, l), t in sorted(self.q.items())}
        out["omega"] = self.omega.ranks
        return out


def build_weight_tt(geo: GeometryMap, space: InterpolationSpace, tol: float,
                    samples: Optional[dict] = None) -> WeightTT:
    """Interpolate ``omega`` and ``Q`` into coefficient trains.

    Each ``q[k, l]`` is truncated relative to the Frobenius norm of the whole
    ``Q`` sample field, so that numerically vanishing entries collapse to a
    rank-one train instead of resolving rounding noise.
    """
    samples = sample_all_weights(geo, space) if samples is None else samples
    D = geo.dim
    q_norm = math.sqrt(sum(np.sum(v ** 2) * (1 if k == l else 2)
                           for (k, l), v in ((key, val) for key, val in samples.items()
                                             if key != "omega")))
    omega = interpolate_weight_tt(samples["omega"], space, tol)
    q = {}
    for k in range(D):
        for l in range(k, D):
            q[(k, l)] = interpolate_weight_tt(samples[(k, l)], space, tol, norm_ref=q_norm)
    return WeightTT(omega, q, space)


def _rules(geo: GeometryMap, space: InterpolationSpace, rule) -> list:
    """Per-dimension quadrature rules from ``None``, an int or explicit rules."""
    out = []
    for d, spl in enumerate(geo.space.factors):
        if rule is None:
            m = default_nodes_per_span(spl.degree, space.factors[d].degree)
            out.append(gauss_legendre_per_span(spl, m))
        elif isinstance(rule, (int, np.integer)):
            out.append(gauss_legendre_per_span(spl, int(rule)))
        elif isinstance(rule, QuadratureRule):
            out.append(rule)
        else:
            out.append(rule[d])
    return out


class _FactorBuilder:
    """Caches basis values at quadrature nodes for one dimension."""

    def __init__(self, spline: UnivariateSpline, interp: UnivariateSpline, rule: QuadratureRule):
        self.rule = rule
        self.b0 = basis_matrix(spline, rule.nodes)
        self.b1 = (basis_matrix(spline, rule.nodes, 1) if spline.degree >= 1
                   else np.zeros_like(self.b0))
        self.bt = basis_matrix(interp, rule.nodes)

    def mass(self, coeffs: np.ndarray) -> np.ndarray:
        return weighted_gram(self.b0, self.b0, self.rule.weights * (self.bt @ coeffs))

    def stiffness(self, k: int, l: int, d: int, coeffs: np.ndarray) -> np.ndarray:
        wq = self.rule.weights * (self.bt @ coeffs)
        left = self.b1 if l == d else self.b0
        right = self.b1 if k == d else self.b0
        return weighted_gram(left, right, wq)


def assemble_mass_lr(geo: GeometryMap, space: InterpolationSpace, tol: float, rule=None,
                     weights: Optional[WeightTT] = None) -> KroneckerSum:
    """Mass matrix as one Kronecker product per canonical slice of the omega train."""
    if weights is None:
        omega = interpolate_weight_tt(sample_weight_grid(geo, space, "omega"), space, tol)
    else:
        omega = weights.omega
    rules = _rules(geo, space, rule)
    builders = [_FactorBuilder(s, i, r) for s, i, r in zip(geo.space.factors, space.factors, rules)]
    terms = []
    for slice_ in tt_to_canonical_slices(omega):
        terms.append([b.mass(w) for b, w in zip(builders, slice_)])
    return KroneckerSum(terms)


def assemble_stiffness_lr(geo: GeometryMap, space: InterpolationSpace, tol: float, rule=None,
                          weights: Optional[WeightTT] = None) -> KroneckerSum:
    """Stiffness matrix as a Kronecker sum over ``(k, l)`` and the slices of ``q[k, l]``.

    Factor ``d`` of a term differentiates the trial function iff ``l == d``
    and the test function iff ``k == d``.
    """
    if weights is None:
        weights = build_weight_tt(geo, space, tol)
    rules = _rules(geo, space, rule)
    builders = [_FactorBuilder(s, i, r) for s, i, r in zip(geo.space.factors, space.factors, rules)]
    D = geo.dim
    terms = []
    for k in range(D):
        for l in range(D):
            for slice_ in tt_to_canonical_slices(weights.q_entry(k, l)):
                terms.append([builders[d].stiffness(k, l, d, slice_[d]) for d in range(D)])
    return KroneckerSum(terms)


# ---------------------------------------------------------------------------
# dense reference

def assemble_dense(geo: GeometryMap, which: str = "mass", rule=None,
                   row_cap: int = DENSE_ROW_CAP, batch: int = 256) -> scipy.sparse.csr_matrix:
    """Reference assembly by an element loop with exact weights at quadrature nodes.

    Args:
        which: ``"mass"`` or ``"stiffness"``.
        rule: nodes per span (int), per-dimension rules, or ``None`` for the
            default used by the low-rank path with a ``D*p+1`` weight space.

    Raises:
        SizeCapError: if the matrix has more than ``row_cap`` rows.
    """
    if which not in ("mass", "stiffness"):
        raise DomainError("which must be 'mass' or 'stiffness'")
    space = geo.space
    D = space.dim
    ndof = math.prod(space.dims)
    if ndof > row_cap:
        raise SizeCapError("dense assembly of %d rows exceeds cap %d" % (ndof, row_cap))
    if rule is None:
        rule = [gauss_legendre_per_span(s, default_nodes_per_span(s.degree, D * s.degree + 1))
                for s in space.factors]
    elif isinstance(rule, (int, np.integer)):
        rule = [gauss_legendre_per_span(s, int(rule)) for s in space.factors]
    elif isinstance(rule, QuadratureRule):
        rule = [rule] * D

    # per-dimension element data: local basis values on each span
    elems = []
    for s, r in zip(space.factors, rule):
        p = s.degree
        spans = s.spans()
        m = r.nodes.size // len(spans)
        b0 = basis_matrix(s, r.nodes)
        b1 = basis_matrix(s, r.nodes, 1) if p >= 1 else np.zeros_like(b0)
        first = np.searchsorted(s.knots, [a for a, _ in spans], side="right") - 1 - p
        vals, ders, idx = [], [], []
        for e in range(len(spans)):
            rows = slice(e * m, (e + 1) * m)
            cols = np.arange(first[e], first[e] + p + 1)
            vals.append(b0[rows][:, cols])
            ders.append(b1[rows][:, cols])
            idx.append(cols)
        elems.append((np.array(vals), np.array(ders), np.array(idx), m, r.weights.reshape(len(spans), m)))

    _, jac = geo.grid([r.nodes for r in rule])
    if which == "mass":
        wfield = omega_from_jacobian(jac)
    else:
        wfield = q_from_jacobian(jac, [r.nodes for r in rule])

    counts = [len(e[0]) for e in elems]
    all_elems = np.array(list(np.ndindex(*counts)))
    rows_out, cols_out, vals_out = [], [], []
    for start in range(0, len(all_elems), batch):
        eb = all_elems[start:start + batch]
        E = len(eb)
        # local basis (E, Q, A) and gradients (E, Q, A, D) by tensor products
        loc = np.ones((E, 1, 1))
        grads = [np.ones((E, 1, 1)) for _ in range(D)]
        wq = np.ones((E, 1))
        gidx = np.zeros((E, 1), dtype=np.int64)
        for d, (vals, ders, idx, m, w) in enumerate(elems):
            v = vals[eb[:, d]]
            dv = ders[eb[:, d]]
            loc = _batched_outer(loc, v)
            for g in range(D):
                grads[g] = _batched_outer(grads[g], dv if g == d else v)
            wq = (wq[:, :, None] * w[eb[:, d]][:, None, :]).reshape(E, -1)
            gidx = (gidx[:, :, None] * space.dims[d] + idx[eb[:, d]][:, None, :]).reshape(E, -1)
        # weight values at the element's quadrature points
        sl = []
        for d, (vals, ders, idx, m, w) in enumerate(elems):
            sl.append(eb[:, d][:, None] * m + np.arange(m)[None, :])
        if which == "mass":
            wv = _gather_grid(wfield, sl)                       # (E, Q)
            local = np.matmul(np.swapaxes(loc * (wq * wv)[..., None], 1, 2), loc)
        else:
            G = np.stack(grads, axis=-1)                        # (E, Q, A, D)
            Qv = _gather_grid(wfield, sl)                       # (E, Q, D, D)
            AG = np.matmul(G, np.swapaxes(Qv, -1, -2))          # sum_l q_kl d_l B_i
            AG *= wq[:, :, None, None]
            Qn = G.shape[1]
            AG = np.swapaxes(AG, 1, 2).reshape(E, -1, Qn * D)
            G = np.swapaxes(G, 1, 2).reshape(E, -1, Qn * D)
            local = np.matmul(AG, np.swapaxes(G, 1, 2))
        A = local.shape[1]
        rows_out.append(np.repeat(gidx, A, axis=1).ravel())
        cols_out.append(np.tile(gidx, (1, A)).ravel())
        vals_out.append(local.reshape(E, -1).ravel())
    mat = scipy.sparse.coo_matrix(
        (np.concatenate(vals_out), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(ndof, ndof))
    return mat.tocsr()


def _batched_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-element tensor product of (E, Qa, A) and (E, Qb, B) -> (E, Qa*Qb, A*B)."""
    E = a.shape[0]
    out = a[:, :, None, :, None] * b[:, None, :, None, :]
    return out.reshape(E, a.shape[1] * b.shape[1], a.shape[2] * b.shape[2])


def _gather_grid(field: np.ndarray, slices) -> np.ndarray:
    """Values of a grid field on each element's local tensor grid, flattened."""
    E = slices[0].shape[0]
    D = len(slices)
    index = []
    for d, s in enumerate(slices):
        shape = [E] + [1] * D
        shape[d + 1] = s.shape[1]
        index.append(s.reshape(shape))
    sub = field[tuple(index)]
    return sub.reshape((E, -1) + field.shape[D:])


# ---------------------------------------------------------------------------
# comparison and post-processing

def _tensor_pattern(A: KroneckerSum):
    """Per-dimension (rows, cols) of the union of factor sparsity patterns."""
    pats = []
    for d in range(A.ndim):
        mask = np.zeros(A.terms[0][d].shape, dtype=bool)
        for term in A.terms:
            mask |= term[d] != 0
        pats.append(np.nonzero(mask))
    return pats


def relative_frobenius_diff(A: KroneckerSum, B) -> float:
    """``||B - A||_F / ||B||_F`` for a Kronecker sum ``A`` and a reference ``B``.

    ``A`` is evaluated only on the tensor product of its per-dimension factor
    patterns, so it is never materialized and no cancellation occurs.
    """
    B = scipy.sparse.coo_matrix(B)
    if B.shape != A.shape:
        raise DomainError("shape mismatch %s vs %s" % (A.shape, B.shape))
    pats = _tensor_pattern(A)
    rdims, cdims = A.row_dims, A.col_dims
    rows = np.zeros(1, dtype=np.int64)
    cols = np.zeros(1, dtype=np.int64)
    for d, (r, c) in enumerate(pats):
        rows = (rows[:, None] * rdims[d] + r[None, :]).ravel()
        cols = (cols[:, None] * cdims[d] + c[None, :]).ravel()
    avals = np.zeros(rows.size)
    for term in A.terms:
        v = np.ones(1)
        for d, (r, c) in enumerate(pats):
            v = np.outer(v, term[d][r, c]).ravel()
        avals += v
    ncols = A.shape[1]
    akeys = rows * ncols + cols
    bkeys = B.row.astype(np.int64) * ncols + B.col.astype(np.int64)
    if akeys.size == 0:
        akeys, avals = np.array([-1], dtype=np.int64), np.zeros(1)
    order = np.argsort(akeys)
    akeys, avals = akeys[order], avals[order]
    pos = np.searchsorted(akeys, bkeys)
    pos_c = np.minimum(pos, akeys.size - 1)
    hit = akeys[pos_c] == bkeys
    diff = avals.copy()
    np.subtract.at(diff, pos_c[hit], B.data[hit])
    sq = float(np.sum(diff ** 2) + np.sum(B.data[~hit] ** 2))
    bnorm = float(np.linalg.norm(B.data))
    if bnorm == 0.0:
        return 0.0 if sq == 0.0 else math.inf
    return math.sqrt(sq) / bnorm


def eliminate_dirichlet(op: KroneckerSum, space: Optional[TensorSpace] = None) -> KroneckerSum:
    """Drop the first and last basis index of every dimension from all factors."""
    if space is not None and (op.row_dims != space.dims or op.col_dims != space.dims):
        raise DomainError("operator dims %s do not match space %s" % (op.row_dims, space.dims))
    for n in op.row_dims + op.col_dims:
        if n < 3:
            raise DomainError("need at least 3 basis functions per dimension to eliminate boundary")
    return KroneckerSum([[f[1:-1, 1:-1] for f in term] for term in op.terms])


def eliminate_dirichlet_dense(mat, dims: Sequence[int]):
    """Boundary elimination applied to a materialized matrix (reference path)."""
    keep = np.ones(dims, dtype=bool)
    for d in range(len(dims)):
        sl = [slice(None)] * len(dims)
        sl[d] = 0
        keep[tuple(sl)] = False
        sl[d] = -1
        keep[tuple(sl)] = False
    idx = np.flatnonzero(keep.ravel())
    mat = scipy.sparse.csr_matrix(mat)
    return mat[idx][:, idx]


def dense_nnz(space: TensorSpace) -> int:
    """Nonzeros of the Galerkin matrix pattern of a tensor-product space."""
    total = 1
    for s in space.factors:
        kv, p, n = s.knots, s.degree, s.n
        lo, hi = kv[:n], kv[p + 1:p + 1 + n]
        overlap = np.maximum(lo[:, None], lo[None, :]) < np.minimum(hi[:, None], hi[None, :])
        total *= int(overlap.sum())
    return total


@dataclass
class OperatorLR:
    """Low-rank mass and stiffness operators of one discretization."""

    mass: KroneckerSum
    stiffness: KroneckerSum
    dims: tuple
    weights: Optional[WeightTT] = None
    eliminated: bool = False

    def interior(self) -> "OperatorLR":
        """Boundary-eliminated copy (may only be applied once)."""
        if self.eliminated:
            raise ValidationError("Dirichlet elimination already applied")
        return OperatorLR(eliminate_dirichlet(self.mass), eliminate_dirichlet(self.stiffness),
                          tuple(n - 2 for n in self.dims), self.weights, True)

    def storage(self) -> int:
        return self.mass.storage() + self.stiffness.storage()


def assemble_operators(geo: GeometryMap, tol: float, rule=None,
                       degree_override: Optional[int] = None, adapt: bool = True) -> OperatorLR:
    """Interpolate the weights once and assemble both low-rank operators.

    With ``adapt`` the interpolation space is refined until its off-grid
    residual drops below ``0.1*tol`` (see :func:`adapt_interpolation_space`).
    """
    space = build_interpolation_space(geo, "stiffness", degree_override)
    if adapt:
        space = adapt_interpolation_space(geo, space, tol)
    weights = build_weight_tt(geo, space, tol)
    mass = assemble_mass_lr(geo, space, tol, rule, weights)
    stiff = assemble_stiffness_lr(geo, space, tol, rule, weights)
    return OperatorLR(mass, stiff, geo.space.dims, weights)
