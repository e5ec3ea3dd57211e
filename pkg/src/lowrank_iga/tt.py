"""Tensor trains, block tensor trains and Kronecker-sum operators.

Index conventions: a tensor of shape ``(n_1, ..., n_D)`` is vectorized in
row-major order (``i_1`` slowest), so ``kron(A_1, ..., A_D)`` acts on it
with ``A_d`` operating on axis ``d``.  TT cores have shape
``(R_{d-1}, n_d, R_d)``; the block core of a :class:`BlockTt` has shape
``(R_{d-1}, n_d, L, R_d)``.
"""

from __future__ import annotations

import math
import struct
from typing import List, Optional, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.sparse

from .exceptions import DomainError, SizeCapError, ValidationError
from .splines import mode_product

DEFAULT_SIZE_CAP = 2 ** 26


# ---------------------------------------------------------------------------
# dense helpers

def svd(mat: np.ndarray):
    """Thin SVD with a deterministic sign convention.

    The largest-magnitude entry of every left singular vector is made
    positive (the matching right singular vector is flipped with it).
    """
    try:
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError:
        u, s, vt = scipy.linalg.svd(mat, full_matrices=False, lapack_driver="gesvd")
    if u.size:
        idx = np.argmax(np.abs(u), axis=0)
        signs = np.sign(u[idx, np.arange(u.shape[1])])
        signs[signs == 0] = 1.0
        u = u * signs
        vt = vt * signs[:, None]
    return u, s, vt


def truncation_rank(s: np.ndarray, delta: float, cap: Optional[int] = None) -> int:
    """Smallest ``r >= 1`` with ``||s[r:]||_2 <= delta`` (optionally capped)."""
    if s.size == 0:
        return 1
    tail = np.sqrt(np.cumsum((s ** 2)[::-1])[::-1])
    tail = np.append(tail, 0.0)
    r = int(np.argmax(tail <= delta))
    r = max(r, 1)
    if cap is not None:
        r = min(r, max(int(cap), 1))
    return min(r, s.size)


def _qr(mat):
    q, r = np.linalg.qr(mat)
    return q, r


# ---------------------------------------------------------------------------
# tensor train

class TtTensor:
    """Tensor in TT format.

    Args:
        cores: order-3 arrays, core ``d`` of shape ``(R_{d-1}, n_d, R_d)`` with
            ``R_0 = R_D = 1``.
    """

    def __init__(self, cores: Sequence[np.ndarray]):
        cores = [np.asarray(c, dtype=float) for c in cores]
        if not cores:
            raise ValidationError("a tensor train needs at least one core")
        for c in cores:
            if c.ndim != 3:
                raise ValidationError("TT cores must be order-3 arrays")
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise ValidationError("boundary TT ranks must equal 1")
        for a, b in zip(cores[:-1], cores[1:]):
            if a.shape[2] != b.shape[0]:
                raise ValidationError("inconsistent TT ranks %d != %d" % (a.shape[2], b.shape[0]))
        self.cores = cores

    @property
    def ndim(self) -> int:
        return len(self.cores)

    @property
    def shape(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple:
        """Interior ranks ``(R_1, ..., R_{D-1})``."""
        return tuple(c.shape[2] for c in self.cores[:-1])

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def storage(self) -> int:
        return sum(c.size for c in self.cores)

    def full(self, cap: int = DEFAULT_SIZE_CAP) -> np.ndarray:
        return tt_to_full(self, cap)

    def norm(self) -> float:
        return tt_norm(self)

    def copy(self) -> "TtTensor":
        return TtTensor([c.copy() for c in self.cores])

    def __mul__(self, alpha):
        return tt_scale(self, alpha)

    __rmul__ = __mul__

    def __add__(self, other):
        return tt_add(self, other)

    def __sub__(self, other):
        return tt_add(self, tt_scale(other, -1.0))

    def __repr__(self):
        return "TtTensor(shape=%s, ranks=%s)" % (self.shape, self.ranks)


def tt_rank1(vectors: Sequence[np.ndarray]) -> TtTensor:
    """Rank-one train ``a_1 (x) ... (x) a_D``."""
    return TtTensor([np.asarray(v, dtype=float).reshape(1, -1, 1) for v in vectors])


def tt_zeros(shape: Sequence[int]) -> TtTensor:
    return TtTensor([np.zeros((1, n, 1)) for n in shape])


def tt_random(shape: Sequence[int], ranks: Union[int, Sequence[int]], rng=None) -> TtTensor:
    rng = np.random.default_rng(rng)
    D = len(shape)
    if np.isscalar(ranks):
        ranks = [int(ranks)] * (D - 1)
    rr = [1] + list(ranks) + [1]
    return TtTensor([rng.standard_normal((rr[d], shape[d], rr[d + 1])) for d in range(D)])


def tt_to_full(t: TtTensor, cap: int = DEFAULT_SIZE_CAP) -> np.ndarray:
    """Dense tensor represented by ``t``.

    Raises:
        SizeCapError: if the dense tensor would exceed ``cap`` entries.
    """
    if t.size > cap:
        raise SizeCapError("refusing to densify a tensor with %d entries (cap %d)" % (t.size, cap))
    out = t.cores[0].reshape(t.cores[0].shape[1], -1)
    for c in t.cores[1:]:
        out = (out @ c.reshape(c.shape[0], -1)).reshape(-1, c.shape[2])
    return out.reshape(t.shape)


def tt_svd(full: np.ndarray, tol: float, norm_ref: Optional[float] = None,
           max_rank: Optional[int] = None) -> TtTensor:
    """TT-SVD compression of a dense tensor.

    Each of the ``D-1`` unfoldings is truncated with threshold
    ``tol * norm_ref / sqrt(D-1)`` so that the reconstruction error is at most
    ``tol * norm_ref``; ``norm_ref`` defaults to the Frobenius norm of ``full``.
    """
    if not tol > 0:
        raise DomainError("tolerance must be positive")
    full = np.asarray(full, dtype=float)
    shape = full.shape
    D = len(shape)
    nrm = float(np.linalg.norm(full))
    if nrm == 0.0:
        return tt_zeros(shape)
    if D == 1:
        return TtTensor([full.reshape(1, -1, 1).copy()])
    ref = nrm if norm_ref is None else float(norm_ref)
    if nrm <= tol * ref * (1 - 1e-12):
        return tt_zeros(shape)          # the zero train already meets the bound
    delta = tol * ref / math.sqrt(D - 1)
    cores = []
    rank = 1
    c = full
    for d in range(D - 1):
        c = c.reshape(rank * shape[d], -1)
        u, s, vt = svd(c)
        r = truncation_rank(s, delta, max_rank)
        cores.append(u[:, :r].reshape(rank, shape[d], r))
        c = s[:r, None] * vt[:r]
        rank = r
    cores.append(c.reshape(rank, shape[-1], 1))
    return TtTensor(cores)


def tt_scale(t: TtTensor, alpha: float) -> TtTensor:
    cores = [c.copy() for c in t.cores]
    cores[0] = cores[0] * alpha
    return TtTensor(cores)


def tt_add(a: TtTensor, b: TtTensor) -> TtTensor:
    """Exact sum; ranks add."""
    if a.shape != b.shape:
        raise DomainError("cannot add trains of shapes %s and %s" % (a.shape, b.shape))
    D = a.ndim
    if D == 1:
        return TtTensor([a.cores[0] + b.cores[0]])
    cores = []
    for d, (x, y) in enumerate(zip(a.cores, b.cores)):
        if d == 0:
            cores.append(np.concatenate([x, y], axis=2))
        elif d == D - 1:
            cores.append(np.concatenate([x, y], axis=0))
        else:
            c = np.zeros((x.shape[0] + y.shape[0], x.shape[1], x.shape[2] + y.shape[2]))
            c[:x.shape[0], :, :x.shape[2]] = x
            c[x.shape[0]:, :, x.shape[2]:] = y
            cores.append(c)
    return TtTensor(cores)


def tt_sum(terms: Sequence[TtTensor]) -> TtTensor:
    """Exact sum of several trains (ranks add), in the given order."""
    if len(terms) == 1:
        return terms[0].copy()
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise DomainError("cannot add trains of shapes %s and %s" % (shape, t.shape))
    D = len(shape)
    if D == 1:
        return TtTensor([sum(t.cores[0] for t in terms)])
    cores = [np.concatenate([t.cores[0] for t in terms], axis=2)]
    for d in range(1, D - 1):
        r0 = [t.cores[d].shape[0] for t in terms]
        r1 = [t.cores[d].shape[2] for t in terms]
        c = np.zeros((sum(r0), shape[d], sum(r1)))
        o0 = o1 = 0
        for t, a, b in zip(terms, r0, r1):
            c[o0:o0 + a, :, o1:o1 + b] = t.cores[d]
            o0 += a
            o1 += b
        cores.append(c)
    cores.append(np.concatenate([t.cores[-1] for t in terms], axis=0))
    return TtTensor(cores)


def tt_dot(a: TtTensor, b: TtTensor) -> float:
    """Euclidean inner product of the represented tensors."""
    if a.shape != b.shape:
        raise DomainError("shape mismatch %s vs %s" % (a.shape, b.shape))
    phi = np.ones((1, 1))
    for x, y in zip(a.cores, b.cores):
        phi = np.einsum("rs,snS->rnS", phi, y)
        phi = np.einsum("rnR,rnS->RS", x, phi)
    return float(phi[0, 0])


def tt_norm(t: TtTensor) -> float:
    """Frobenius norm, computed through a right-to-left orthogonalization."""
    cores = right_orthogonalize(t.cores)
    return float(np.linalg.norm(cores[0]))


def right_orthogonalize(cores: Sequence[np.ndarray], stop: int = 0) -> List[np.ndarray]:
    """Make cores ``stop+1 .. D-1`` right-orthogonal; the norm moves into ``stop``."""
    cores = [c.copy() for c in cores]
    for d in range(len(cores) - 1, stop, -1):
        c = cores[d]
        r0, n, r1 = c.shape
        q, r = _qr(c.reshape(r0, n * r1).T)
        cores[d] = q.T.reshape(-1, n, r1)
        cores[d - 1] = np.tensordot(cores[d - 1], r.T, axes=(2, 0))
    return cores


def left_orthogonalize(cores: Sequence[np.ndarray], stop: Optional[int] = None) -> List[np.ndarray]:
    """Make cores ``0 .. stop-1`` left-orthogonal; the norm moves into ``stop``."""
    cores = [c.copy() for c in cores]
    stop = len(cores) - 1 if stop is None else stop
    for d in range(stop):
        c = cores[d]
        r0, n, r1 = c.shape
        q, r = _qr(c.reshape(r0 * n, r1))
        cores[d] = q.reshape(r0, n, -1)
        cores[d + 1] = np.tensordot(r, cores[d + 1], axes=(1, 0))
    return cores


def tt_round(t: TtTensor, tol: float, max_rank: Optional[int] = None) -> TtTensor:
    """Recompress a train to relative accuracy ``tol``.

    Ranks never increase.  ``tol = 0`` removes only exactly redundant
    directions.
    """
    D = t.ndim
    if D == 1:
        return t.copy()
    cores = right_orthogonalize(t.cores)
    nrm = float(np.linalg.norm(cores[0]))
    if nrm == 0.0:
        return tt_zeros(t.shape)
    delta = tol * nrm / math.sqrt(D - 1)
    for d in range(D - 1):
        c = cores[d]
        r0, n, r1 = c.shape
        u, s, vt = svd(c.reshape(r0 * n, r1))
        r = truncation_rank(s, delta, max_rank)
        if tol == 0:
            r = max(1, min(r, int(np.sum(s > 0))))
        cores[d] = u[:, :r].reshape(r0, n, r)
        cores[d + 1] = np.tensordot(s[:r, None] * vt[:r], cores[d + 1], axes=(1, 0))
    return TtTensor(cores)


def tt_to_canonical_slices(t: TtTensor) -> List[List[np.ndarray]]:
    """Enumerate a train as a sum of ``prod(R_d)`` rank-one terms.

    Term ``(r_1, ..., r_{D-1})`` holds the fibers ``W_d(r_{d-1}, :, r_d)``;
    summing the outer products of the returned factor lists reproduces the
    represented tensor.  Terms are ordered with ``r_1`` slowest.
    """
    ranks = [1] + list(t.ranks) + [1]
    out = []
    for idx in np.ndindex(*ranks[1:-1]):
        full_idx = (0,) + idx + (0,)
        out.append([t.cores[d][full_idx[d], :, full_idx[d + 1]].copy() for d in range(t.ndim)])
    return out


# ---------------------------------------------------------------------------
# block tensor train

class BlockTt:
    """Tensor train carrying ``L`` components in one designated core.

    Component ``l`` is the train obtained by fixing index ``l`` of the
    block core ``cores[block_position]`` of shape ``(R, n, L, R')``.
    """

    def __init__(self, cores: Sequence[np.ndarray], block_position: int):
        cores = [np.asarray(c, dtype=float) for c in cores]
        if not 0 <= block_position < len(cores):
            raise ValidationError("block position %d out of range" % block_position)
        for d, c in enumerate(cores):
            want = 4 if d == block_position else 3
            if c.ndim != want:
                raise ValidationError("core %d must have %d axes, has %d" % (d, want, c.ndim))
        if cores[0].shape[0] != 1 or cores[-1].shape[-1] != 1:
            raise ValidationError("boundary TT ranks must equal 1")
        for a, b in zip(cores[:-1], cores[1:]):
            if a.shape[-1] != b.shape[0]:
                raise ValidationError("inconsistent block TT ranks")
        self.cores = cores
        self.block_position = int(block_position)

    @property
    def ndim(self) -> int:
        return len(self.cores)

    @property
    def num_components(self) -> int:
        return self.cores[self.block_position].shape[2]

    @property
    def shape(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple:
        return tuple(c.shape[-1] for c in self.cores[:-1])

    def storage(self) -> int:
        return sum(c.size for c in self.cores)

    def component(self, l: int) -> TtTensor:
        cores = list(self.cores)
        cores[self.block_position] = self.cores[self.block_position][:, :, l, :]
        return TtTensor(cores)

    def components(self) -> List[TtTensor]:
        return [self.component(l) for l in range(self.num_components)]

    def full(self, cap: int = DEFAULT_SIZE_CAP) -> np.ndarray:
        """Dense array of shape ``(L, n_1, ..., n_D)``."""
        return np.stack([tt_to_full(c, cap) for c in self.components()])

    def copy(self) -> "BlockTt":
        return BlockTt([c.copy() for c in self.cores], self.block_position)

    def __repr__(self):
        return "BlockTt(shape=%s, L=%d, block=%d, ranks=%s)" % (
            self.shape, self.num_components, self.block_position, self.ranks)


def block_from_tts(trains: Sequence[TtTensor], block_position: int = 0) -> BlockTt:
    """Exact block train holding the given trains as components (ranks add)."""
    L = len(trains)
    D = trains[0].ndim
    for t in trains[1:]:
        if t.shape != trains[0].shape:
            raise DomainError("components must share a shape")
    rl = [[1] + list(t.ranks) + [1] for t in trains]
    tot = [1] + [sum(r[d] for r in rl) for d in range(1, D)] + [1]
    cores = []
    for d in range(D):
        n = trains[0].shape[d]
        blk = d == block_position
        c = np.zeros((tot[d], n, L, tot[d + 1]) if blk else (tot[d], n, tot[d + 1]))
        o0 = o1 = 0
        for l, t in enumerate(trains):
            a, b = rl[l][d], rl[l][d + 1]
            s0 = slice(0, 1) if d == 0 else slice(o0, o0 + a)
            s1 = slice(0, 1) if d == D - 1 else slice(o1, o1 + b)
            if blk:
                c[s0, :, l, s1] = t.cores[d]
            else:
                c[s0, :, s1] = t.cores[d]
            o0 += a
            o1 += b
        cores.append(c)
    return BlockTt(cores, block_position)


def block_from_full(arrays: np.ndarray, tol: float, block_position: int = 0) -> BlockTt:
    """Compress dense components (shape ``(L, n_1, ..., n_D)``) into a block train."""
    arrays = np.asarray(arrays, dtype=float)
    L, shape = arrays.shape[0], arrays.shape[1:]
    # place the component axis right after the block dimension and merge them
    t = np.moveaxis(arrays, 0, block_position + 1)
    merged = list(shape)
    merged[block_position] *= L
    tt = tt_svd(t.reshape(merged), tol) if np.any(t) else tt_zeros(merged)
    cores = list(tt.cores)
    c = cores[block_position]
    cores[block_position] = c.reshape(c.shape[0], shape[block_position], L, c.shape[2])
    return BlockTt(cores, block_position)


def block_core_move(b: BlockTt, direction: str, tol: float = 0.0,
                    max_rank: Optional[int] = None) -> BlockTt:
    """Move the component axis one core to the left or right via a truncated SVD.

    The vacated core becomes left-orthogonal (moving right) or
    right-orthogonal (moving left).  ``tol`` is relative to the norm of the
    block core.

    Raises:
        DomainError: when moving past either end of the train.
    """
    d = b.block_position
    cores = list(b.cores)
    blk = cores[d]
    r0, n, L, r1 = blk.shape
    nrm = float(np.linalg.norm(blk))
    if direction == "right":
        if d + 1 >= b.ndim:
            raise DomainError("cannot move block past the last core")
        u, s, vt = svd(blk.reshape(r0 * n, L * r1))
        r = truncation_rank(s, tol * nrm, max_rank)
        cores[d] = u[:, :r].reshape(r0, n, r)
        sv = (s[:r, None] * vt[:r]).reshape(r, L, r1)
        cores[d + 1] = np.einsum("alr,rnb->anlb", sv, cores[d + 1])
        return BlockTt(cores, d + 1)
    if direction == "left":
        if d == 0:
            raise DomainError("cannot move block past the first core")
        mat = np.transpose(blk, (2, 0, 1, 3)).reshape(L * r0, n * r1)
        u, s, vt = svd(mat)
        r = truncation_rank(s, tol * nrm, max_rank)
        cores[d] = vt[:r].reshape(r, n, r1)
        us = (u[:, :r] * s[:r]).reshape(L, r0, r)
        cores[d - 1] = np.einsum("anr,lrb->anlb", cores[d - 1], us)
        return BlockTt(cores, d - 1)
    raise DomainError("direction must be 'left' or 'right', got %r" % direction)


def block_orthogonalize(b: BlockTt) -> BlockTt:
    """Left-orthogonalize cores before the block and right-orthogonalize after it."""
    d = b.block_position
    cores = list(b.cores)
    for k in range(d):
        r0, n, r1 = cores[k].shape
        q, r = _qr(cores[k].reshape(r0 * n, r1))
        cores[k] = q.reshape(r0, n, -1)
        cores[k + 1] = np.tensordot(r, cores[k + 1], axes=(1, 0))
    for k in range(b.ndim - 1, d, -1):
        r0, n, r1 = cores[k].shape
        q, r = _qr(cores[k].reshape(r0, n * r1).T)
        cores[k] = q.T.reshape(-1, n, r1)
        cores[k - 1] = np.tensordot(cores[k - 1], r.T, axes=(cores[k - 1].ndim - 1, 0))
    return BlockTt(cores, d)


def block_move_to(b: BlockTt, position: int, tol: float = 0.0,
                  max_rank: Optional[int] = None) -> BlockTt:
    while b.block_position < position:
        b = block_core_move(b, "right", tol, max_rank)
    while b.block_position > position:
        b = block_core_move(b, "left", tol, max_rank)
    return b


def block_round(b: BlockTt, tol: float, max_rank: Optional[int] = None) -> BlockTt:
    """Recompress a block train by sweeping the block to the last core and back."""
    start = b.block_position
    b = block_orthogonalize(block_move_to(block_orthogonalize(b), 0))
    per = tol / math.sqrt(max(b.ndim - 1, 1))
    b = block_move_to(b, b.ndim - 1, per, max_rank)
    b = block_move_to(b, 0, per, max_rank)
    return block_move_to(b, start)


def frame_matrix(b: BlockTt, d: int, cap: int = DEFAULT_SIZE_CAP) -> np.ndarray:
    """Dense frame matrix of all cores but ``d`` (desk scale only)."""
    shape = b.shape
    if math.prod(shape) * b.cores[d].shape[0] * b.cores[d].shape[-1] > cap:
        raise SizeCapError("frame matrix too large to materialize")
    left = np.ones((1, 1))
    for c in b.cores[:d]:
        left = (left @ c.reshape(c.shape[0], -1)).reshape(-1, c.shape[2])
    right = np.ones((1, 1))
    for c in reversed(b.cores[d + 1:]):
        right = (c.reshape(-1, c.shape[2]) @ right).reshape(c.shape[0], -1)
    n = shape[d]
    f = np.einsum("ar,ij,Rb->aibrjR", left, np.eye(n), right)
    return f.reshape(math.prod(shape), -1)


# ---------------------------------------------------------------------------
# Kronecker-sum operators

class KroneckerSum:
    """Matrix ``sum_t kron(A_t1, ..., A_tD)`` stored by its factor matrices.

    Args:
        terms: sequence of terms, each a sequence of ``D`` 2-d factor arrays
            (dense ndarrays or scipy sparse matrices).
    """

    def __init__(self, terms: Sequence[Sequence]):
        terms = [tuple(_as_factor(f) for f in term) for term in terms]
        if not terms:
            raise ValidationError("a Kronecker sum needs at least one term")
        D = len(terms[0])
        shapes = [f.shape for f in terms[0]]
        for term in terms:
            if len(term) != D or [f.shape for f in term] != shapes:
                raise ValidationError("all terms must share per-dimension factor shapes")
        self.terms = terms

    @property
    def ndim(self) -> int:
        return len(self.terms[0])

    @property
    def num_terms(self) -> int:
        return len(self.terms)

    @property
    def row_dims(self) -> tuple:
        return tuple(f.shape[0] for f in self.terms[0])

    @property
    def col_dims(self) -> tuple:
        return tuple(f.shape[1] for f in self.terms[0])

    @property
    def shape(self) -> tuple:
        return math.prod(self.row_dims), math.prod(self.col_dims)

    def storage(self) -> int:
        """Total number of nonzero factor entries."""
        return sum(int(np.count_nonzero(f)) for term in self.terms for f in term)

    def transpose(self) -> "KroneckerSum":
        return KroneckerSum([[f.T for f in term] for term in self.terms])

    @property
    def T(self):
        return self.transpose()

    def scaled(self, alpha: float) -> "KroneckerSum":
        return KroneckerSum([(term[0] * alpha,) + tuple(term[1:]) for term in self.terms])

    def __add__(self, other: "KroneckerSum") -> "KroneckerSum":
        return KroneckerSum(list(self.terms) + list(other.terms))

    def __neg__(self):
        return self.scaled(-1.0)

    def __mul__(self, alpha):
        return self.scaled(alpha)

    __rmul__ = __mul__

    def prepend(self, factor) -> "KroneckerSum":
        """``kron(factor, self)`` as a Kronecker sum with one more dimension."""
        return KroneckerSum([(factor,) + tuple(term) for term in self.terms])

    def to_sparse(self, cap: int = DEFAULT_SIZE_CAP):
        rows, cols = self.shape
        if rows > cap or cols > cap:
            raise SizeCapError("operator with %d rows exceeds size cap" % rows)
        out = None
        for term in self.terms:
            m = scipy.sparse.csr_matrix(term[0])
            for f in term[1:]:
                m = scipy.sparse.kron(m, scipy.sparse.csr_matrix(f), format="csr")
            out = m if out is None else out + m
        return out.tocsr()

    def to_dense(self, cap: int = DEFAULT_SIZE_CAP) -> np.ndarray:
        rows, cols = self.shape
        if rows * cols > cap:
            raise SizeCapError("refusing to densify a %dx%d operator" % (rows, cols))
        out = np.zeros((rows, cols))
        for term in self.terms:
            m = np.ones((1, 1))
            for f in term:
                m = np.kron(m, f)
            out += m
        return out

    def __repr__(self):
        return "KroneckerSum(terms=%d, row_dims=%s, col_dims=%s)" % (
            self.num_terms, self.row_dims, self.col_dims)


def _as_factor(f):
    if scipy.sparse.issparse(f):
        f = f.toarray()
    f = np.asarray(f, dtype=float)
    if f.ndim != 2:
        raise ValidationError("Kronecker factors must be matrices")
    return f


def kron_apply(A: KroneckerSum, v, tol: float = 1e-14, max_rank: Optional[int] = None):
    """Apply a Kronecker sum to a dense vector or to a tensor train.

    The dense path contracts one mode at a time and never forms a Kronecker
    product.  The TT path multiplies every core by its factor, adds the term
    trains (ranks add) and rounds the result to relative accuracy ``tol``
    (``tol=None`` skips rounding).
    """
    if isinstance(v, TtTensor):
        if v.shape != A.col_dims:
            raise DomainError("train shape %s does not match operator columns %s"
                              % (v.shape, A.col_dims))
        out = tt_sum([_apply_term_tt(term, v) for term in A.terms])
        return out if tol is None else tt_round(out, tol, max_rank)
    v = np.asarray(v, dtype=float)
    if v.size != A.shape[1]:
        raise DomainError("vector of length %d does not match operator with %d columns"
                          % (v.size, A.shape[1]))
    x = v.reshape(A.col_dims)
    out = np.zeros(A.row_dims)
    for term in A.terms:
        out += mode_product(x, term)
    return out.reshape(v.shape if v.ndim == 1 else (-1,) + v.shape[1:])


def _apply_term_tt(term, v: TtTensor) -> TtTensor:
    return TtTensor([np.einsum("mn,rnR->rmR", f, c) for f, c in zip(term, v.cores)])


def left_interface(phi: np.ndarray, u: np.ndarray, factor: np.ndarray, v: np.ndarray) -> np.ndarray:
    """One left-to-right step of ``U^T A V`` interface contraction.

    ``phi`` has shape ``(Ru, Rv)``; ``u``/``v`` are TT cores of the test/trial
    trains; returns the interface of shape ``(Ru', Rv')``.
    """
    t = np.tensordot(phi, v, axes=(1, 0))              # (Ru, n, Rv')
    t = np.tensordot(factor, t, axes=(1, 1))           # (m, Ru, Rv')
    return np.tensordot(u, t, axes=([0, 1], [1, 0]))   # (Ru', Rv')


def right_interface(psi: np.ndarray, u: np.ndarray, factor: np.ndarray, v: np.ndarray) -> np.ndarray:
    """One right-to-left step of the interface contraction (see :func:`left_interface`)."""
    t = np.tensordot(v, psi, axes=(2, 1))              # (Rv, n, Ru')
    t = np.tensordot(factor, t, axes=(1, 1))           # (m, Rv, Ru')
    return np.tensordot(u, t, axes=([1, 2], [0, 2]))   # (Ru, Rv)


def frame_project(b: BlockTt, d: int, A: KroneckerSum) -> np.ndarray:
    """Galerkin projection ``F^T A F`` onto the frame of all cores but ``d``.

    The result has size ``(R_{d-1} n_d R_d)^2``; it is accumulated term by term
    from left and right interface contractions without forming the frame.
    """
    if d != b.block_position:
        raise DomainError("frame position %d differs from block position %d" % (d, b.block_position))
    if A.ndim != b.ndim or A.col_dims != b.shape or A.row_dims != b.shape:
        raise DomainError("operator dims do not match block train shape %s" % (b.shape,))
    cores = b.cores
    r0, r1 = cores[d].shape[0], cores[d].shape[-1]
    n = b.shape[d]
    out = np.zeros((r0 * n * r1, r0 * n * r1))
    for term in A.terms:
        phi = np.ones((1, 1))
        for k in range(d):
            phi = left_interface(phi, cores[k], term[k], cores[k])
        psi = np.ones((1, 1))
        for k in range(b.ndim - 1, d, -1):
            psi = right_interface(psi, cores[k], term[k], cores[k])
        out += np.kron(np.kron(phi, term[d]), psi)
    return out


# ---------------------------------------------------------------------------
# TTB1 binary format

_MAGIC = b"TTB1"


def save_ttb(path, t: Union[TtTensor, BlockTt]) -> None:
    """Write a plain or block train in the little-endian TTB1 format."""
    if isinstance(t, BlockTt):
        D, L, pos = t.ndim, t.num_components, t.block_position
    else:
        D, L, pos = t.ndim, 1, t.ndim
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", D, L, pos))
        for c in t.cores:
            fh.write(struct.pack("<%dI" % c.ndim, *c.shape))
            fh.write(np.ascontiguousarray(c, dtype="<f8").tobytes())


def load_ttb(path) -> Union[TtTensor, BlockTt]:
    """Read a train written by :func:`save_ttb`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValidationError("%s: not a TTB1 file" % path)
    D, L, pos = struct.unpack_from("<III", data, 4)
    off = 16
    cores = []
    for d in range(D):
        nd = 4 if (L > 1 or pos < D) and d == pos else 3
        dims = struct.unpack_from("<%dI" % nd, data, off)
        off += 4 * nd
        cnt = math.prod(dims)
        arr = np.frombuffer(data, dtype="<f8", count=cnt, offset=off).reshape(dims)
        off += 8 * cnt
        cores.append(arr.astype(float))
    if off != len(data):
        raise ValidationError("%s: trailing bytes in TTB1 file" % path)
    if pos >= D:
        return TtTensor(cores)
    return BlockTt(cores, pos)
