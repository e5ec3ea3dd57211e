"""Parabolic optimal control: all-at-once KKT system and its block-TT solver.

Minimize ``(tau/2) sum_k [(y_k - yhat_k)^T M (y_k - yhat_k) + beta u_k^T M u_k]``
subject to implicit Euler steps ``M (y_k - y_{k-1}) + tau K y_k = tau M u_k``
with ``y_0 = 0``.  With ``calM = I (x) M`` and ``calK = I (x) tau K + C (x) M``
the optimality conditions read::

    [ tau calM      0        calK^T  ] [y]   [tau calM yhat]
    [    0     tau beta calM -tau calM ] [u] = [      0      ]
    [  calK     -tau calM      0     ] [l]   [      0      ]

Vectors are ordered with the time index slowest, so every block is a
Kronecker sum over ``D + 1`` dimensions with time as the first factor.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .assembly import OperatorLR
from .exceptions import DomainError, IllConditionedError, SizeCapError, ValidationError
from .tt import (BlockTt, KroneckerSum, TtTensor, block_from_tts, block_orthogonalize, kron_apply,
                 left_interface, right_interface, right_orthogonalize, svd, truncation_rank,
                 tt_dot, tt_norm, tt_round, tt_sum, tt_zeros)

log = logging.getLogger(__name__)

ORACLE_CAP = 30000
COMPONENTS = ("y", "u", "lambda")


def build_time_matrices(num_steps: int):
    """Identity and backward-difference matrix ``C`` of size ``N_t``.

    ``C`` has ones on the diagonal and minus ones on the first subdiagonal,
    which encodes implicit Euler with the initial state ``y_0 = 0``.
    """
    if num_steps < 1:
        raise ValidationError("number of time steps must be >= 1")
    eye = np.eye(num_steps)
    return eye, eye - np.eye(num_steps, k=-1)


@dataclass
class ControlProblem:
    """Discrete tracking problem on a boundary-eliminated spline space.

    ``desired_state`` is either a train over ``(N_t, n_1, ..., n_D)`` or a
    spatial train over ``(n_1, ..., n_D)`` that is held constant in time.
    """

    horizon: float
    num_steps: int
    beta: float
    desired_state: TtTensor
    operators: OperatorLR

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValidationError("time horizon must be positive")
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise ValidationError("number of time steps must be a positive integer")
        if not self.beta > 0:
            raise ValidationError("regularization beta must be positive")
        if not self.operators.eliminated:
            raise ValidationError("control problems need boundary-eliminated operators")

    @property
    def tau(self) -> float:
        return self.horizon / self.num_steps

    @property
    def spatial_dims(self) -> tuple:
        return tuple(self.operators.dims)

    @property
    def shape(self) -> tuple:
        return (self.num_steps,) + self.spatial_dims

    def desired_in_time(self) -> TtTensor:
        """``yhat`` as a train with a leading time core."""
        t = self.desired_state
        if t.shape == self.shape:
            return t
        if t.shape == self.spatial_dims:
            return TtTensor([np.ones((1, self.num_steps, 1))] + [c.copy() for c in t.cores])
        raise DomainError("desired state shape %s matches neither %s nor %s"
                          % (t.shape, self.spatial_dims, self.shape))


@dataclass
class KktOperator:
    """Three-by-three block operator of the optimality system.

    Attributes:
        mass: ``calM = I (x) M`` over ``D + 1`` dimensions.
        stiff: ``calK = I (x) tau K + C (x) M``.
        tau, beta: step size and regularization.
        rhs: right-hand side ``(tau calM yhat, 0, 0)`` as a block train.
    """

    mass: KroneckerSum
    stiff: KroneckerSum
    tau: float
    beta: float
    rhs: Optional[BlockTt] = None

    def __post_init__(self):
        self.stiff_t = self.stiff.transpose()

    @property
    def base_operators(self) -> List[KroneckerSum]:
        return [self.mass, self.stiff, self.stiff_t]

    @property
    def couplings(self) -> list:
        """Nonzero blocks as ``(row, col, coefficient, base operator index)``."""
        t, b = self.tau, self.beta
        return [(0, 0, t, 0), (0, 2, 1.0, 2),
                (1, 1, t * b, 0), (1, 2, -t, 0),
                (2, 0, 1.0, 1), (2, 1, -t, 0)]

    @property
    def shape(self) -> tuple:
        return self.mass.row_dims

    @property
    def blocks(self) -> list:
        """Dense-free 3x3 grid of Kronecker sums (``None`` marks a zero block)."""
        grid = [[None] * 3 for _ in range(3)]
        ops = self.base_operators
        for i, j, c, k in self.couplings:
            grid[i][j] = ops[k] if c == 1.0 else ops[k].scaled(c)
        return grid

    def to_sparse(self, cap: int = ORACLE_CAP):
        n = math.prod(self.shape)
        if 3 * n > cap:
            raise SizeCapError("KKT system with %d unknowns exceeds the cap of %d" % (3 * n, cap))
        grid = [[None if blk is None else blk.to_sparse() for blk in row] for row in self.blocks]
        for i in range(3):
            if grid[i][i] is None:
                grid[i][i] = scipy.sparse.csr_matrix((n, n))
        return scipy.sparse.bmat(grid, format="csc")

    def to_dense(self, cap: int = ORACLE_CAP) -> np.ndarray:
        return self.to_sparse(cap).toarray()

    def apply(self, x: Sequence[TtTensor], round_tol: Optional[float] = None) -> List[TtTensor]:
        """Block matrix-vector product on component trains."""
        ops = self.base_operators
        rows = [[] for _ in range(3)]
        for i, j, c, k in self.couplings:
            rows[i].append(kron_apply(ops[k], x[j], tol=None) * c)
        out = [tt_sum(r) for r in rows]
        if round_tol is not None:
            out = [tt_round(r, round_tol) for r in out]
        return out


def build_kkt(problem: ControlProblem) -> KktOperator:
    """Kronecker form of the optimality system together with its right-hand side."""
    ops = problem.operators
    eye, C = build_time_matrices(problem.num_steps)
    tau = problem.tau
    mass = ops.mass.prepend(eye)
    stiff = ops.stiffness.scaled(tau).prepend(eye) + ops.mass.prepend(C)
    yhat = problem.desired_in_time()
    if yhat.shape != mass.col_dims:
        raise DomainError("desired state shape %s does not match operator dims %s"
                          % (yhat.shape, mass.col_dims))
    b0 = kron_apply(mass, yhat, tol=1e-14) * tau
    zero = tt_zeros(mass.row_dims)
    kkt = KktOperator(mass, stiff, tau, problem.beta)
    kkt.rhs = block_from_tts([b0, zero, zero], 0)
    return kkt


# ---------------------------------------------------------------------------
# Block AMEn

@dataclass
class AmenConfig:
    """Solver parameters.

    Attributes:
        tol: target relative residual of the full system.
        max_sweeps: maximal number of half sweeps (one direction each).
        enrichment_rank: rank of the residual train used for enrichment.
        local_solver: "direct", "minres" or "auto" (direct while the local
            system has at most ``dense_limit`` unknowns).
        local_tol: MINRES tolerance; defaults to ``0.1 * tol``.
        local_maxit: MINRES iteration cap.
        rank_cap: upper bound on the solution ranks.
        trunc_tol: SVD truncation of the local solution; defaults to ``1e-4 * tol``.
        dense_limit: size switch of the "auto" local solver.
        schur_limit: largest block size for which MINRES gets the exact
            Schur-complement preconditioner instead of Jacobi scaling.
        seed: seed of the random initial guess.
    """

    tol: float = 1e-6
    max_sweeps: int = 30
    enrichment_rank: int = 3
    local_solver: str = "auto"
    local_tol: Optional[float] = None
    local_maxit: int = 500
    rank_cap: int = 200
    trunc_tol: Optional[float] = None
    dense_limit: int = 2000
    schur_limit: int = 4000
    seed: int = 42

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.enrichment_rank < 0:
            raise ValidationError("enrichment_rank must be >= 0")
        if self.local_solver not in ("auto", "direct", "minres"):
            raise ValidationError("local_solver must be auto, direct or minres")
        if self.local_tol is None:
            self.local_tol = 0.1 * self.tol
        if self.trunc_tol is None:
            self.trunc_tol = 1e-4 * self.tol


@dataclass
class AmenResult:
    solution: BlockTt
    converged: bool
    sweeps: int
    residuals: List[float] = field(default_factory=list)

    @property
    def residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")

    @property
    def max_rank(self) -> int:
        return max(self.solution.ranks, default=1)


class SingularLocalSystemError(IllConditionedError):
    """The projected system at one core could not be solved."""

    def __init__(self, sweep: int, core: int, detail: str = ""):
        self.sweep, self.core = sweep, core
        super().__init__("singular projected system in sweep %d at core %d%s"
                         % (sweep, core, (": " + detail) if detail else ""))


def _contract(phi: np.ndarray, factor: Optional[np.ndarray], psi: np.ndarray, core: np.ndarray) -> np.ndarray:
    """``(phi (x) factor (x) psi) vec(core)`` returned as a core."""
    t = np.tensordot(phi, core, axes=(1, 0))                    # (Ra, n, Rb')
    if factor is not None:
        t = np.moveaxis(np.tensordot(factor, t, axes=(1, 1)), 0, 1)
    return np.tensordot(t, psi, axes=(2, 1))                    # (Ra, m, Ra')


def _left_id(phi, u, v):
    return np.tensordot(u, np.tensordot(phi, v, axes=(1, 0)), axes=([0, 1], [0, 1]))


def _right_id(psi, u, v):
    return np.tensordot(u, np.tensordot(v, psi, axes=(2, 1)), axes=([1, 2], [1, 2]))


class _Sweeper:
    """State of one Block-AMEn run: iterate, residual train and interfaces."""

    def __init__(self, kkt: KktOperator, rhs: BlockTt, cfg: AmenConfig):
        self.kkt, self.cfg = kkt, cfg
        self.ops = kkt.base_operators
        self.shape = kkt.shape
        self.D = len(self.shape)
        self.rhs = [c if tt_norm(c) > 0 else None for c in rhs.components()]
        rng = np.random.default_rng(cfg.seed)
        cores = [rng.standard_normal((1, n, 1)) for n in self.shape]
        cores[0] = rng.standard_normal((1, self.shape[0], 3, 1))
        x = BlockTt(cores, 0)
        x.cores[0] /= np.linalg.norm(x.cores[0])
        self.x = block_orthogonalize(x)
        rz = cfg.enrichment_rank
        if rz > 0:
            zc = [rng.standard_normal((1 if d == 0 else rz, n, 1 if d == self.D - 1 else rz))
                  for d, n in enumerate(self.shape)]
            self.z = right_orthogonalize(zc)
        else:
            self.z = None
        D = self.D
        one = np.ones((1, 1))
        # interfaces: phi[k] covers cores < k, psi[k] covers cores > k
        self.xax_l = [[[one] * (D + 1) for _ in op.terms] for op in self.ops]
        self.xax_r = [[[one] * D for _ in op.terms] for op in self.ops]
        self.zax_l = [[[one] * (D + 1) for _ in op.terms] for op in self.ops]
        self.zax_r = [[[one] * D for _ in op.terms] for op in self.ops]
        self.xb_l = [[one] * (D + 1) for _ in range(3)]
        self.xb_r = [[one] * D for _ in range(3)]
        self.zb_l = [[one] * (D + 1) for _ in range(3)]
        self.zb_r = [[one] * D for _ in range(3)]
        for k in range(D - 1, 0, -1):
            self._update_right(k)

    # -- interfaces -----------------------------------------------------------
    def _update_left(self, k: int):
        """Recompute interfaces at ``k + 1`` after core ``k`` became left-orthogonal."""
        xk = self.x.cores[k]
        zk = self.z[k] if self.z is not None else None
        for o, op in enumerate(self.ops):
            for t, term in enumerate(op.terms):
                self.xax_l[o][t][k + 1] = left_interface(self.xax_l[o][t][k], xk, term[k], xk)
                if zk is not None:
                    self.zax_l[o][t][k + 1] = left_interface(self.zax_l[o][t][k], zk, term[k], xk)
        for i, b in enumerate(self.rhs):
            if b is None:
                continue
            self.xb_l[i][k + 1] = _left_id(self.xb_l[i][k], xk, b.cores[k])
            if zk is not None:
                self.zb_l[i][k + 1] = _left_id(self.zb_l[i][k], zk, b.cores[k])

    def _update_right(self, k: int):
        """Recompute interfaces at ``k - 1`` after core ``k`` became right-orthogonal."""
        xk = self.x.cores[k]
        zk = self.z[k] if self.z is not None else None
        for o, op in enumerate(self.ops):
            for t, term in enumerate(op.terms):
                self.xax_r[o][t][k - 1] = right_interface(self.xax_r[o][t][k], xk, term[k], xk)
                if zk is not None:
                    self.zax_r[o][t][k - 1] = right_interface(self.zax_r[o][t][k], zk, term[k], xk)
        for i, b in enumerate(self.rhs):
            if b is None:
                continue
            self.xb_r[i][k - 1] = _right_id(self.xb_r[i][k], xk, b.cores[k])
            if zk is not None:
                self.zb_r[i][k - 1] = _right_id(self.zb_r[i][k], zk, b.cores[k])

    # -- local problem ----------------------------------------------------------
    def _projected(self, o: int, k: int) -> np.ndarray:
        """Dense ``sum_t phi_t (x) A_t (x) psi_t`` for base operator ``o`` at core ``k``."""
        terms = self.ops[o].terms
        phi = np.stack([self.xax_l[o][t][k] for t in range(len(terms))])   # (T, a, b)
        fac = np.stack([term[k] for term in terms])                        # (T, m, n)
        psi = np.stack([self.xax_r[o][t][k] for t in range(len(terms))])   # (T, A, B)
        T, a, b = phi.shape
        _, m, n = fac.shape
        _, A, B = psi.shape
        pf = np.einsum("tab,tmn->ambnt", phi, fac).reshape(-1, T)
        out = (pf @ psi.reshape(T, -1)).reshape(a, m, b, n, A, B)
        return out.transpose(0, 1, 4, 2, 3, 5).reshape(a * m * A, b * n * B)

    def _apply_local(self, k: int, xs: Sequence[np.ndarray], left, right) -> List[np.ndarray]:
        """Block operator applied to component cores ``xs`` in a given frame pair."""
        out = [None] * 3
        for i, j, c, o in self.kkt.couplings:
            for t, term in enumerate(self.ops[o].terms):
                v = c * _contract(left[o][t][k], term[k], right[o][t][k], xs[j])
                out[i] = v if out[i] is None else out[i] + v
        return out

    def _rhs_local(self, k: int, left, right, shape) -> List[np.ndarray]:
        out = []
        for i, b in enumerate(self.rhs):
            if b is None:
                out.append(np.zeros(shape))
            else:
                out.append(_contract(left[i][k], None, right[i][k], b.cores[k]))
        return out

    def _solve_local(self, k: int, sweep: int) -> np.ndarray:
        blk = self.x.cores[k]
        r0, n, _, r1 = blk.shape
        shape = (r0, n, r1)
        m = r0 * n * r1
        f = [v.ravel() for v in self._rhs_local(k, self.xb_l, self.xb_r, shape)]
        if not any(np.any(v) for v in f):
            return np.zeros((3,) + shape)
        solver = self.cfg.local_solver
        if solver == "auto":
            solver = "direct" if 3 * m <= self.cfg.dense_limit else "minres"
        schur = None
        if solver == "direct" or m <= self.cfg.schur_limit:
            schur = self._schur(k, sweep)
        if solver == "direct":
            sol = self._schur_solve(schur, f)
        else:
            x0 = np.concatenate([blk[:, :, j, :].ravel() for j in range(3)])
            sol = self._minres(k, np.concatenate(f), x0, shape, sweep, schur)
        if not np.all(np.isfinite(sol)):
            raise SingularLocalSystemError(sweep, k, "non-finite local solution")
        return sol.reshape((3,) + shape)

    def _schur(self, k: int, sweep: int):
        """Cholesky factors of ``P_M`` and of ``S = P_K (tau P_M)^-1 P_K^T + (tau/beta) P_M``.

        ``P_M``, ``P_K`` are the projections of the mass and stiffness
        operators; ``S`` is the Schur complement left after eliminating the
        state and control of the local saddle-point system.
        """
        tau, beta = self.kkt.tau, self.kkt.beta
        pm = self._projected(0, k)
        pk = self._projected(1, k)
        try:
            cm = scipy.linalg.cho_factor(pm)
            S = pk @ scipy.linalg.cho_solve(cm, pk.T) / tau + (tau / beta) * pm
            cs = scipy.linalg.cho_factor(S)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularLocalSystemError(sweep, k, str(exc)) from None
        return pm, pk, cm, cs

    def _schur_solve(self, schur, f) -> np.ndarray:
        _, pk, cm, cs = schur
        tau, beta = self.kkt.tau, self.kkt.beta
        f0, f1, f2 = f
        g = pk @ scipy.linalg.cho_solve(cm, f0) / tau - f1 / beta - f2
        lam = scipy.linalg.cho_solve(cs, g)
        y = scipy.linalg.cho_solve(cm, f0 - pk.T @ lam) / tau
        u = scipy.linalg.cho_solve(cm, f1) / (tau * beta) + lam / beta
        return np.concatenate([y, u, lam])

    def _minres(self, k, f, x0, shape, sweep, schur=None):
        """MINRES with a symmetric positive definite block-diagonal preconditioner.

        With the Schur factors at hand the preconditioner is
        ``diag(tau P_M, tau beta P_M, S)``; otherwise the diagonals of those
        blocks (Jacobi scaling) are used.
        """
        m = math.prod(shape)
        tau, beta = self.kkt.tau, self.kkt.beta
        if schur is not None:
            pm, pk, cm, cs = schur

            def mv(v):
                y, u, lam = v[:m], v[m:2 * m], v[2 * m:]
                return np.concatenate([tau * (pm @ y) + pk.T @ lam,
                                       tau * beta * (pm @ u) - tau * (pm @ lam),
                                       pk @ y - tau * (pm @ u)])

            def prec(v):
                return np.concatenate([scipy.linalg.cho_solve(cm, v[:m]) / tau,
                                       scipy.linalg.cho_solve(cm, v[m:2 * m]) / (tau * beta),
                                       scipy.linalg.cho_solve(cs, v[2 * m:])])
        else:
            def mv(v):
                xs = [v[j * m:(j + 1) * m].reshape(shape) for j in range(3)]
                return np.concatenate([y.ravel() for y in self._apply_local(k, xs, self.xax_l, self.xax_r)])

            diag = []
            for o in range(2):
                d = 0.0
                for t, term in enumerate(self.ops[o].terms):
                    d = d + np.einsum("a,m,b->amb", np.diag(self.xax_l[o][t][k]), np.diag(term[k]),
                                      np.diag(self.xax_r[o][t][k])).ravel()
                diag.append(d)
            dm = tau * np.abs(diag[0])
            pdiag = np.concatenate([dm, beta * dm, diag[1] ** 2 / np.maximum(dm, 1e-300) + (tau / beta) * np.abs(diag[0])])
            if np.any(pdiag <= 0):
                raise SingularLocalSystemError(sweep, k, "nonpositive preconditioner diagonal")

            def prec(v):
                return v / pdiag

        A = scipy.sparse.linalg.LinearOperator((3 * m, 3 * m), matvec=mv, dtype=float)
        M = scipy.sparse.linalg.LinearOperator((3 * m, 3 * m), matvec=prec, dtype=float)
        sol, info = scipy.sparse.linalg.minres(A, f, x0=x0, M=M, rtol=self.cfg.local_tol,
                                               maxiter=self.cfg.local_maxit)
        if info != 0:
            log.debug("local MINRES stopped with info=%d at core %d", info, k)
        return sol

    # -- core moves with enrichment -----------------------------------------------
    def _residual_cores(self, k, xs, left_op, right_op, left_b, right_b):
        ax = self._apply_local(k, xs, left_op, right_op)
        shape = ax[0].shape
        rb = self._rhs_local(k, left_b, right_b, shape)
        return [b - a for a, b in zip(ax, rb)]

    def _local_res(self, k, xs) -> float:
        res = self._residual_cores(k, xs, self.xax_l, self.xax_r, self.xb_l, self.xb_r)
        return math.sqrt(sum(float(np.sum(v * v)) for v in res))

    def _select_rank(self, k, xs, u, s, vt, direction, f_norm):
        """Smallest rank whose truncated local solution keeps a small local residual.

        The admissible residual is ``0.1 * tol * ||f||`` or twice the residual of
        the untruncated local solution, whichever is larger (the latter matters
        for inexact iterative local solves).  The rank is found by bisection.
        """
        r0, n, r1 = xs[0].shape
        full = min(max(int(np.sum(s > 0)), 1), self.cfg.rank_cap)
        lo = max(truncation_rank(s, self.cfg.trunc_tol * float(np.linalg.norm(s)), self.cfg.rank_cap), 1)
        lo = min(lo, full)
        target = max(0.1 * self.cfg.tol * f_norm, 2.0 * self._local_res(k, xs))

        def ok(r):
            return self._local_res(k, self._rebuild(u[:, :r], s[:r], vt[:r], direction, r0, n, r1)) <= target

        if ok(lo):
            return lo
        hi = full
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if ok(mid):
                hi = mid
            else:
                lo = mid
        return hi

    @staticmethod
    def _rebuild(u, s, vt, direction, r0, n, r1):
        if direction == "right":
            mat = (u * s) @ vt                                  # (r0 n, 3 r1)
            return list(np.moveaxis(mat.reshape(r0, n, 3, r1), 2, 0))
        mat = (u * s) @ vt                                      # (3 r0, n r1)
        return list(mat.reshape(3, r0, n, r1))

    def step(self, k: int, direction: str, sweep: int):
        sol = self._solve_local(k, sweep)
        xs = list(sol)
        r0, n, r1 = xs[0].shape
        f = self._rhs_local(k, self.xb_l, self.xb_r, (r0, n, r1))
        f_norm = math.sqrt(sum(float(np.sum(v * v)) for v in f))
        # truncate in a norm that weighs the three components equally; their
        # magnitudes differ by orders of magnitude for small beta
        nrm = np.array([np.linalg.norm(v) for v in xs])
        w = np.where(nrm > 1e-300 * max(nrm.max(), 1e-300), 1.0 / np.maximum(nrm, 1e-300), 1.0)
        if direction == "right":
            mat = np.stack([v * c for v, c in zip(xs, w)], axis=2).reshape(r0 * n, 3 * r1)
            u, s, vt = svd(mat)
            vt = (vt.reshape(-1, 3, r1) / w[None, :, None]).reshape(-1, 3 * r1)
        else:
            mat = np.stack([v * c for v, c in zip(xs, w)], axis=0).reshape(3 * r0, n * r1)
            u, s, vt = svd(mat)
            u = (u.reshape(3, r0, -1) / w[:, None, None]).reshape(3 * r0, -1)
        r = self._select_rank(k, xs, u, s, vt, direction, f_norm)
        xr = self._rebuild(u[:, :r], s[:r], vt[:r], direction, r0, n, r1)
        u, s, vt = u[:, :r], s[:r], vt[:r]
        if k + (1 if direction == "right" else -1) not in range(self.D):
            self.x.cores[k] = np.stack(xr, axis=2)
            return
        enrich = None
        if self.z is not None:
            if direction == "right":
                crz = self._residual_cores(k, xr, self.zax_l, self.zax_r, self.zb_l, self.zb_r)
                zmat = np.concatenate([c.reshape(-1, c.shape[2]) for c in crz], axis=1)
                zu = svd(zmat)[0][:, :self.cfg.enrichment_rank]
                self.z[k] = zu.reshape(crz[0].shape[0], n, -1)
                crx = self._residual_cores(k, xr, self.xax_l, self.zax_r, self.xb_l, self.zb_r)
                emat = np.concatenate([c.reshape(r0 * n, -1) for c in crx], axis=1)
                enrich = svd(emat)[0][:, :3 * self.cfg.enrichment_rank]
            else:
                crz = self._residual_cores(k, xr, self.zax_l, self.zax_r, self.zb_l, self.zb_r)
                zmat = np.concatenate([c.reshape(c.shape[0], -1) for c in crz], axis=0)
                zv = svd(zmat)[2][:self.cfg.enrichment_rank]
                self.z[k] = zv.reshape(-1, n, crz[0].shape[2])
                crx = self._residual_cores(k, xr, self.zax_l, self.xax_r, self.zb_l, self.xb_r)
                emat = np.concatenate([c.reshape(-1, n * r1) for c in crx], axis=0)
                enrich = svd(emat.T)[0][:, :3 * self.cfg.enrichment_rank]
        cores = self.x.cores
        if direction == "right":
            basis = u if enrich is None else np.hstack([u, enrich])
            basis = basis[:, :max(r, min(basis.shape[1], self.cfg.rank_cap))]
            q, R = np.linalg.qr(basis)
            carry = (R[:, :r] * s) @ vt                          # (r', 3 r1)
            cores[k] = q.reshape(r0, n, -1)
            carry = carry.reshape(-1, 3, r1)
            cores[k + 1] = np.einsum("alr,rnb->anlb", carry, cores[k + 1])
            self.x = BlockTt(cores, k + 1)
            self._update_left(k)
        else:
            v = vt.T                                             # (n r1, r)
            basis = v if enrich is None else np.hstack([v, enrich])
            basis = basis[:, :max(r, min(basis.shape[1], self.cfg.rank_cap))]
            q, R = np.linalg.qr(basis)
            carry = (u * s) @ R[:, :r].T                         # (3 r0, r')
            cores[k] = q.T.reshape(-1, n, r1)
            carry = carry.reshape(3, r0, -1)
            cores[k - 1] = np.einsum("anr,lrb->anlb", cores[k - 1], carry)
            self.x = BlockTt(cores, k - 1)
            self._update_right(k)


def kkt_residual(kkt: KktOperator, sol: BlockTt, rhs: Optional[BlockTt] = None,
                 round_tol: Optional[float] = None) -> float:
    """Relative residual ``||A x - b|| / ||b||`` of the stacked block system in TT arithmetic.

    Block rows are summed exactly and their norms taken after an orthogonal
    sweep; ``round_tol`` optionally recompresses each row first.  A zero
    right-hand side yields the absolute residual.
    """
    rhs = kkt.rhs if rhs is None else rhs
    x = sol.components()
    b = rhs.components()
    ax = kkt.apply(x)
    res2 = 0.0
    for i in range(3):
        r = tt_sum([ax[i], b[i] * -1.0])
        if round_tol is not None:
            r = tt_round(r, round_tol)
        res2 += tt_norm(r) ** 2
    bn = math.sqrt(sum(tt_norm(c) ** 2 for c in b))
    return math.sqrt(res2) / bn if bn > 0 else math.sqrt(res2)


def block_amen_solve(kkt: KktOperator, rhs: Optional[BlockTt] = None, cfg: Optional[AmenConfig] = None,
                     callback: Optional[Callable[[BlockTt, int], None]] = None) -> AmenResult:
    """Solve the block KKT system by alternating sweeps with residual enrichment.

    Each half sweep visits the cores in one direction, solves the projected
    3x3 system for the block core, truncates it, enriches the basis with the
    projected residual and moves the block one core on.  The full residual is
    checked after every half sweep.

    Args:
        kkt: block operator from :func:`build_kkt`.
        rhs: block right-hand side; defaults to ``kkt.rhs``.
        cfg: solver parameters.
        callback: called as ``callback(x, core)`` right before every local
            solve (the frame of ``x`` at ``core`` is orthonormal there).

    Returns:
        :class:`AmenResult`; when ``max_sweeps`` is exhausted it holds the best
        iterate seen with ``converged=False``.

    Raises:
        SingularLocalSystemError: with sweep and core of a singular local system.
    """
    cfg = cfg or AmenConfig()
    rhs = kkt.rhs if rhs is None else rhs
    if rhs is None or rhs.num_components != 3 or rhs.shape != kkt.shape:
        raise DomainError("right-hand side must be a 3-component block train of shape %s" % (kkt.shape,))
    D = len(kkt.shape)
    if all(tt_norm(c) == 0 for c in rhs.components()):
        zero = BlockTt([np.zeros((1, n, 3, 1)) if d == 0 else np.zeros((1, n, 1))
                        for d, n in enumerate(kkt.shape)], 0)
        return AmenResult(zero, True, 0, [0.0])
    sw = _Sweeper(kkt, rhs, cfg)
    residuals = []
    best = None
    direction = "right"
    for sweep in range(1, cfg.max_sweeps + 1):
        order = range(D) if direction == "right" else range(D - 1, -1, -1)
        for k in order:
            if callback is not None:
                callback(sw.x, k)
            sw.step(k, direction, sweep)
        res = kkt_residual(kkt, sw.x, rhs)
        residuals.append(res)
        log.info("sweep %d (%s): residual %.3e, ranks %s", sweep, direction, res, sw.x.ranks)
        if best is None or res < best[0]:
            best = (res, sw.x.copy(), sweep)
        if res <= cfg.tol:
            return AmenResult(sw.x.copy(), True, sweep, residuals)
        direction = "left" if direction == "right" else "right"
    return AmenResult(best[1], False, cfg.max_sweeps, residuals)


# ---------------------------------------------------------------------------
# objective, norms and the dense oracle

def _mass_norm2(problem: ControlProblem, v: TtTensor) -> float:
    mass = problem.operators.mass.prepend(np.eye(problem.num_steps))
    return tt_dot(v, kron_apply(mass, v, tol=None))


def evaluate_objective(problem: ControlProblem, y: TtTensor, u: TtTensor) -> float:
    """``(tau/2) [(y - yhat)^T calM (y - yhat) + beta u^T calM u]``."""
    e = tt_sum([y, problem.desired_in_time() * -1.0])
    val = 0.5 * problem.tau * (_mass_norm2(problem, e) + problem.beta * _mass_norm2(problem, u))
    return max(val, 0.0)


def control_norm(problem: ControlProblem, u) -> float:
    """Mass-weighted, time-integrated control norm ``sqrt(tau u^T calM u)``."""
    if isinstance(u, TtTensor):
        return math.sqrt(max(problem.tau * _mass_norm2(problem, u), 0.0))
    mass = problem.operators.mass.prepend(np.eye(problem.num_steps))
    u = np.asarray(u, dtype=float).ravel()
    return math.sqrt(max(problem.tau * float(u @ kron_apply(mass, u)), 0.0))


@dataclass
class DenseSolution:
    y: np.ndarray
    u: np.ndarray
    lam: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.y.ravel(), self.u.ravel(), self.lam.ravel()])


def dense_rhs(kkt: KktOperator) -> np.ndarray:
    return np.concatenate([c.full().ravel() for c in kkt.rhs.components()])


def dense_kkt_oracle(problem: ControlProblem, cap: int = ORACLE_CAP) -> DenseSolution:
    """Materialize the optimality system and solve it with a sparse LU factorization."""
    kkt = build_kkt(problem)
    A = kkt.to_sparse(cap)
    b = dense_rhs(kkt)
    sol = scipy.sparse.linalg.splu(A).solve(b)
    n = math.prod(kkt.shape)
    parts = [sol[i * n:(i + 1) * n].reshape(kkt.shape) for i in range(3)]
    return DenseSolution(*parts)
