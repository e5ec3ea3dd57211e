import numpy as np
import pytest

from lowrank_iga.exceptions import DomainError, SizeCapError, ValidationError
from lowrank_iga.tt import (BlockTt, KroneckerSum, TtTensor, block_core_move, block_from_full,
                            block_from_tts, block_orthogonalize, block_round, frame_matrix,
                            frame_project, kron_apply, load_ttb, save_ttb, svd, tt_add, tt_dot,
                            tt_norm, tt_random, tt_rank1, tt_round, tt_svd, tt_to_canonical_slices,
                            tt_to_full, tt_zeros)


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# -- TT-SVD -----------------------------------------------------------------

def test_outer_product_rank_one(rng):
    w = rng.random(5)
    t = tt_svd(np.einsum("i,j,k->ijk", w, w, w), 1e-12)
    assert t.ranks == (1, 1)


def test_random_tensor_roundtrip(rng):
    full = rng.standard_normal((8, 8, 8))
    assert _rel(tt_to_full(tt_svd(full, 1e-12)), full) <= 1e-12


def test_two_rank_one_terms(rng):
    a = [rng.standard_normal(6) for _ in range(3)]
    b = [rng.standard_normal(6) for _ in range(3)]
    full = np.einsum("i,j,k->ijk", *a) + np.einsum("i,j,k->ijk", *b)
    assert tt_svd(full, 1e-10).ranks == (2, 2)


@pytest.mark.parametrize("tol", [1e-2, 1e-6, 1e-12])
def test_error_bound_random(tol, rng):
    for _ in range(20):
        shape = tuple(rng.integers(2, 13, size=rng.integers(2, 4)))
        # graded entries so that truncation actually drops directions
        full = rng.standard_normal(shape) * np.exp(-0.5 * np.indices(shape).sum(axis=0))
        t = tt_svd(full, tol)
        assert np.linalg.norm(tt_to_full(t) - full) <= tol * np.linalg.norm(full) * (1 + 1e-10)


@pytest.mark.parametrize("ranks", [(1, 1), (2, 3), (4, 2), (3, 4)])
def test_exact_rank_recovery(ranks, rng):
    t = tt_random((7, 8, 9), ranks, rng)
    assert tt_svd(tt_to_full(t), 1e-10).ranks == ranks


def test_zero_tensor():
    t = tt_svd(np.zeros((3, 4, 5)), 1e-6)
    assert t.ranks == (1, 1) and not np.any(tt_to_full(t))


def test_nonpositive_tol_rejected():
    with pytest.raises(DomainError):
        tt_svd(np.ones((2, 2)), 0.0)


def test_svd_sign_convention(rng):
    u, _, _ = svd(rng.standard_normal((6, 4)))
    idx = np.abs(u).argmax(axis=0)
    assert np.all(u[idx, np.arange(u.shape[1])] > 0)


# -- rounding and densification ---------------------------------------------

def test_round_zero_tol_keeps_ranks(rng):
    t = tt_random((4, 5, 6), 2, rng)
    assert all(a <= b for a, b in zip(tt_round(t, 0.0).ranks, t.ranks))
    assert _rel(tt_to_full(tt_round(t, 0.0)), tt_to_full(t)) <= 1e-13


def test_round_removes_redundancy(rng):
    t = tt_random((4, 5, 6), 2, rng)
    doubled = tt_add(t, t)
    r = tt_round(doubled, 1e-12)
    assert r.ranks == t.ranks
    assert _rel(tt_to_full(r), 2 * tt_to_full(t)) <= 1e-12


def test_round_idempotent(rng):
    full = rng.standard_normal((6, 6, 6))
    t = tt_svd(full, 1e-14)
    eps = 0.3
    once = tt_round(t, eps)
    twice = tt_round(once, eps)
    assert twice.ranks == once.ranks
    assert _rel(tt_to_full(twice), tt_to_full(once)) <= eps
    assert _rel(tt_to_full(once), full) <= eps


def test_round_rank_one():
    t = tt_rank1([np.arange(1.0, 4), np.ones(2), np.array([1.0, -1])])
    assert tt_round(t, 1e-8).ranks == (1, 1)


def test_rank1_full():
    a, b, c = np.array([1.0, 2]), np.array([3.0, 4, 5]), np.array([-1.0, 1])
    np.testing.assert_array_equal(tt_to_full(tt_rank1([a, b, c])), np.einsum("i,j,k->ijk", a, b, c))


def test_single_dimension_train():
    v = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(tt_to_full(TtTensor([v.reshape(1, 3, 1)])), v)


def test_size_cap():
    with pytest.raises(SizeCapError):
        tt_to_full(tt_zeros((10, 10, 10)), cap=999)


def test_dot_and_norm(rng):
    a, b = tt_random((3, 4, 5), 2, rng), tt_random((3, 4, 5), 3, rng)
    assert tt_dot(a, b) == pytest.approx(np.sum(tt_to_full(a) * tt_to_full(b)), rel=1e-12)
    assert tt_norm(a) == pytest.approx(np.linalg.norm(tt_to_full(a)), rel=1e-12)


def test_bad_ranks_rejected():
    with pytest.raises(ValidationError):
        TtTensor([np.ones((1, 2, 2)), np.ones((3, 2, 1))])


# -- canonical slices -------------------------------------------------------

def test_canonical_slice_counts(rng):
    assert len(tt_to_canonical_slices(tt_random((3, 3, 3), 1, rng))) == 1
    assert len(tt_to_canonical_slices(tt_random((3, 3, 3), (2, 3), rng))) == 6


def test_canonical_reconstruction(rng):
    t = tt_random((4, 5, 3), (3, 2), rng)
    total = sum(np.einsum("i,j,k->ijk", *f) for f in tt_to_canonical_slices(t))
    assert _rel(total, tt_to_full(t)) <= 1e-13


# -- Kronecker sums ---------------------------------------------------------

def test_identity_term(rng):
    A = KroneckerSum([[np.eye(3), np.eye(4)]])
    v = rng.random(12)
    np.testing.assert_array_equal(kron_apply(A, v), v)


def test_kron_vec_identity(rng):
    A, B, X = (rng.standard_normal((4, 4)) for _ in range(3))
    # row-major vec: kron(A, B) acts on X with rows indexed by A's dimension
    lhs = kron_apply(KroneckerSum([[A, B]]), X.ravel())
    np.testing.assert_allclose(lhs, (A @ X @ B.T).ravel(), atol=1e-12)
    # column-major statement (A kron B) vec(X) = vec(B X A^T)
    np.testing.assert_allclose(np.kron(A, B) @ X.ravel(order="F"), (B @ X @ A.T).ravel(order="F"), atol=1e-12)
    np.testing.assert_allclose(kron_apply(KroneckerSum([[A, B]]), X.T.ravel()),
                               (B @ X @ A.T).T.ravel(), atol=1e-12)


def test_two_terms_vs_dense(rng):
    terms = [[rng.standard_normal((3, 3)) for _ in range(3)] for _ in range(2)]
    A = KroneckerSum(terms)
    dense = sum(np.kron(np.kron(*t[:2]), t[2]) for t in terms)
    np.testing.assert_allclose(A.to_dense(), dense, atol=1e-13)
    v = rng.standard_normal(27)
    assert _rel(kron_apply(A, v), dense @ v) <= 1e-12


def test_tt_path_matches_dense(rng):
    terms = [[rng.standard_normal((4, 4)) for _ in range(3)] for _ in range(3)]
    A = KroneckerSum(terms)
    v = tt_random((4, 4, 4), 2, rng)
    out = kron_apply(A, v, tol=1e-14)
    ref = kron_apply(A, tt_to_full(v).ravel())
    assert _rel(tt_to_full(out).ravel(), ref) <= 1e-11


def test_shape_mismatch():
    A = KroneckerSum([[np.eye(2), np.eye(3)]])
    with pytest.raises(DomainError):
        kron_apply(A, np.ones(5))
    with pytest.raises(DomainError):
        kron_apply(A, tt_rank1([np.ones(3), np.ones(2)]))


def test_kronecker_sum_validation():
    with pytest.raises(ValidationError):
        KroneckerSum([[np.eye(2), np.eye(3)], [np.eye(3), np.eye(3)]])


def test_kronecker_sum_algebra(rng):
    A = KroneckerSum([[rng.random((2, 3)), rng.random((4, 2))]])
    np.testing.assert_allclose(A.T.to_dense(), A.to_dense().T)
    np.testing.assert_allclose((A + A.scaled(2.0)).to_dense(), 3 * A.to_dense())
    P = A.prepend(np.eye(2))
    np.testing.assert_allclose(P.to_dense(), np.kron(np.eye(2), A.to_dense()))


# -- block trains -----------------------------------------------------------

def _random_block(rng, shape=(4, 5, 3), ranks=(2, 3), L=3, pos=1):
    comps = [tt_random(shape, ranks, rng) for _ in range(L)]
    return block_orthogonalize(block_from_tts(comps, pos)), comps


def test_block_components_exact(rng):
    b, comps = _random_block(rng)
    for l, c in enumerate(comps):
        assert _rel(tt_to_full(b.component(l)), tt_to_full(c)) <= 1e-13


def test_core_move_roundtrip(rng):
    b, _ = _random_block(rng)
    back = block_core_move(block_core_move(b, "right"), "left")
    assert back.block_position == b.block_position
    assert _rel(back.full(), b.full()) <= 1e-13
    back = block_core_move(block_core_move(b, "left"), "right")
    assert _rel(back.full(), b.full()) <= 1e-13


def test_core_move_orthogonality(rng):
    b, _ = _random_block(rng)
    r = block_core_move(b, "right")
    c = r.cores[1]
    g = c.reshape(-1, c.shape[2])
    np.testing.assert_allclose(g.T @ g, np.eye(g.shape[1]), atol=1e-13)
    l = block_core_move(b, "left")
    c = l.cores[1]
    g = c.reshape(c.shape[0], -1)
    np.testing.assert_allclose(g @ g.T, np.eye(g.shape[0]), atol=1e-13)


def test_core_move_rank_one(rng):
    b = block_from_tts([tt_rank1([rng.random(3) for _ in range(3)])], 0)
    moved = block_core_move(block_core_move(b, "right"), "right")
    assert moved.ranks == (1, 1)


def test_core_move_past_end(rng):
    b, _ = _random_block(rng, pos=2)
    with pytest.raises(DomainError):
        block_core_move(b, "right")
    with pytest.raises(DomainError):
        block_core_move(block_from_tts([tt_random((2, 2), 1, rng)], 0), "left")


def test_linearity_through_frame(rng):
    b, _ = _random_block(rng)
    for d in range(b.ndim):
        bd = block_orthogonalize(_move(b, d))
        F = frame_matrix(bd, d)
        blk = bd.cores[d]
        for l in range(bd.num_components):
            np.testing.assert_allclose(F @ blk[:, :, l, :].ravel(), bd.component(l).full().ravel(), atol=1e-12)
        np.testing.assert_allclose(F.T @ F, np.eye(F.shape[1]), atol=1e-11)


def _move(b, d):
    while b.block_position < d:
        b = block_core_move(b, "right")
    while b.block_position > d:
        b = block_core_move(b, "left")
    return b


def test_block_from_full_and_round(rng):
    comps = [tt_to_full(tt_random((4, 4, 4), 2, rng)) for _ in range(3)]
    b = block_from_full(np.stack(comps), 1e-12, 1)
    assert _rel(b.full(), np.stack(comps)) <= 1e-12
    doubled = block_from_tts(b.components() + b.components(), 0)
    r = block_round(doubled, 1e-12)
    assert max(r.ranks) <= max(doubled.ranks)
    assert _rel(r.full(), doubled.full()) <= 1e-11


def test_block_validation():
    with pytest.raises(ValidationError):
        BlockTt([np.ones((1, 2, 1)), np.ones((1, 2, 1))], 0)


# -- frame projection -------------------------------------------------------

def test_frame_project_identity(rng):
    b, _ = _random_block(rng)
    I = KroneckerSum([[np.eye(n) for n in b.shape]])
    P = frame_project(b, b.block_position, I)
    np.testing.assert_allclose(P, np.eye(P.shape[0]), atol=1e-12)


@pytest.mark.parametrize("d", [0, 1])
def test_frame_project_dense_2d(d, rng):
    comps = [tt_random((5, 6), 3, rng) for _ in range(3)]
    b = block_orthogonalize(block_from_tts(comps, d))
    A = KroneckerSum([[rng.standard_normal((5, 5)), rng.standard_normal((6, 6))] for _ in range(3)])
    F = frame_matrix(b, d)
    ref = F.T @ A.to_dense() @ F
    assert np.abs(frame_project(b, d, A) - ref).max() <= 1e-11 * max(1.0, np.abs(ref).max())


def test_frame_project_symmetric(rng):
    b, _ = _random_block(rng)
    terms = []
    for _ in range(2):
        term = []
        for n in b.shape:
            m = rng.standard_normal((n, n))
            term.append(m + m.T)
        terms.append(term)
    P = frame_project(b, b.block_position, KroneckerSum(terms))
    np.testing.assert_allclose(P, P.T, atol=1e-12)


def test_frame_project_wrong_position(rng):
    b, _ = _random_block(rng)
    with pytest.raises(DomainError):
        frame_project(b, 0, KroneckerSum([[np.eye(n) for n in b.shape]]))


# -- TTB1 -------------------------------------------------------------------

def test_ttb_roundtrip_plain(tmp_path, rng):
    t = tt_random((3, 4, 5), (2, 3), rng)
    save_ttb(tmp_path / "t.ttb", t)
    back = load_ttb(tmp_path / "t.ttb")
    assert isinstance(back, TtTensor)
    for a, c in zip(back.cores, t.cores):
        np.testing.assert_array_equal(a, c)


def test_ttb_roundtrip_block(tmp_path, rng):
    b, _ = _random_block(rng)
    save_ttb(tmp_path / "b.ttb", b)
    back = load_ttb(tmp_path / "b.ttb")
    assert isinstance(back, BlockTt) and back.block_position == b.block_position
    for a, c in zip(back.cores, b.cores):
        np.testing.assert_array_equal(a, c)
    raw = (tmp_path / "b.ttb").read_bytes()
    assert raw[:4] == b"TTB1"
    assert np.frombuffer(raw[4:16], dtype="<u4").tolist() == [3, 3, 1]


def test_ttb_bad_magic(tmp_path):
    p = tmp_path / "x.ttb"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValidationError):
        load_ttb(p)
