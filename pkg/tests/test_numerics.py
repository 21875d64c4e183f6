import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nsamp.numerics import (
    DimensionError,
    NotPositiveDefiniteError,
    NotPSDError,
    NotSymmetricError,
    RankDeficiencyError,
    SeededRng,
    chol_lower,
    gs_block,
    gs_block_reduced,
    inner,
    kron,
    psd_order_margin,
    psd_sqrt,
    spectral_radius,
)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def random_pd(rng, K, jitter=0.1):
    A = rng.standard_normal((K, K))
    return A.T @ A + jitter * np.eye(K)


# -- inner -----------------------------------------------------------------

def test_inner_orthonormal_scaled_is_identity():
    m, K = 400, 3
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((m, K)))
    a = q * np.sqrt(m)
    np.testing.assert_allclose(inner(a, a), np.eye(K), atol=1e-12)


def test_inner_zero():
    assert np.all(inner(np.zeros((5, 2)), np.ones((5, 2))) == 0)


def test_inner_matches_triple_loop():
    rng = np.random.default_rng(1)
    m, K = 1000, 2
    a, b = rng.standard_normal((m, K)), rng.standard_normal((m, K))
    ref = np.zeros((K, K))
    for i in range(K):
        for j in range(K):
            acc = 0.0
            for r in range(m):
                acc += a[r, i] * b[r, j]
            ref[i, j] = acc / m
    np.testing.assert_allclose(inner(a, b), ref, atol=1e-12)


def test_inner_row_mismatch():
    with pytest.raises(DimensionError):
        inner(np.zeros((3, 2)), np.zeros((4, 2)))


# -- psd_sqrt / chol -------------------------------------------------------

def test_psd_sqrt_examples():
    np.testing.assert_allclose(psd_sqrt(np.eye(3)), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)


def test_psd_sqrt_reconstruction():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((3, 3))
    C = A.T @ A
    S = psd_sqrt(C)
    assert np.linalg.norm(S @ S - C) <= 1e-10
    np.testing.assert_allclose(S, S.T, atol=0)


def test_psd_sqrt_clamps_and_rejects():
    S = psd_sqrt(np.diag([1.0, -5e-11]))
    np.testing.assert_allclose(S, np.diag([1.0, 0.0]))
    with pytest.raises(NotPSDError):
        psd_sqrt(np.diag([1.0, -1e-6]))
    with pytest.raises(NotSymmetricError):
        psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_chol_examples():
    np.testing.assert_allclose(chol_lower(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(chol_lower(np.array([[4.0, 2.0], [2.0, 2.0]])), [[2.0, 0.0], [1.0, 1.0]])


def test_chol_reconstruction_random_pd():
    C = random_pd(np.random.default_rng(3), 3)
    L = chol_lower(C)
    assert np.allclose(np.triu(L, 1), 0)
    assert np.linalg.norm(L @ L.T - C) <= 1e-12


def test_chol_reports_failing_pivot():
    C = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 1.0]])
    with pytest.raises(NotPositiveDefiniteError) as exc:
        chol_lower(C)
    assert exc.value.pivot == 2


@settings(max_examples=50, deadline=None)
@given(arrays(float, (4, 4), elements=finite))
def test_chol_and_sqrt_property(A):
    C = A.T @ A + 0.5 * np.eye(4)
    L = chol_lower(C)
    S = psd_sqrt(C)
    scale = np.linalg.norm(C)
    assert np.linalg.norm(L @ L.T - C) <= 1e-12 * scale
    assert np.linalg.norm(S @ S - C) <= 1e-10 * scale


# -- kron / spectral radius -------------------------------------------------

def test_kron_examples():
    np.testing.assert_array_equal(kron(np.eye(2), np.eye(2)), np.eye(4))
    np.testing.assert_array_equal(kron(np.diag([1.0, 2.0]), np.diag([3.0, 4.0])), np.diag([3.0, 4.0, 6.0, 8.0]))


def test_spectral_radius_examples():
    assert spectral_radius(np.diag([0.3, -0.5])) == pytest.approx(0.5, abs=1e-15)
    assert spectral_radius(np.array([[0.0, 1.0], [-0.25, 0.0]])) == pytest.approx(0.5, abs=1e-15)


def _power_deflation_radius(M, iters=20000):
    # largest |eigenvalue| of a symmetric matrix via power iteration on M^2
    rng = np.random.default_rng(0)
    x = rng.standard_normal(M.shape[0])
    M2 = M @ M
    for _ in range(iters):
        x = M2 @ x
        x /= np.linalg.norm(x)
    return np.sqrt(x @ M2 @ x)


def test_spectral_radius_matches_power_iteration():
    # symmetric so the dominant pair is real and power iteration converges
    rng = np.random.default_rng(4)
    A = rng.standard_normal((9, 9))
    M = (A + A.T) / 6
    assert spectral_radius(M) == pytest.approx(_power_deflation_radius(M), abs=1e-6)


def test_spectral_radius_rejects_nonfinite():
    from nsamp.numerics import NumericsError

    with pytest.raises(NumericsError):
        spectral_radius(np.array([[np.nan, 0.0], [0.0, 1.0]]))


# -- order margin ----------------------------------------------------------

def test_psd_order_margin_examples():
    assert psd_order_margin(np.zeros((2, 2)), np.eye(2)) == pytest.approx(1.0)
    X = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert psd_order_margin(X, X) == pytest.approx(0.0, abs=1e-15)
    assert psd_order_margin(np.diag([1.0, 3.0]), np.diag([2.0, 2.0])) == pytest.approx(-1.0)


# -- Gram-Schmidt ----------------------------------------------------------

def test_gs_empty_basis_returns_orthonormal_input():
    m, K = 300, 3
    q, _ = np.linalg.qr(np.random.default_rng(5).standard_normal((m, K)))
    b = q * np.sqrt(m)
    np.testing.assert_allclose(gs_block(b, []), b, atol=1e-12)


def test_gs_in_span_raises():
    rng = np.random.default_rng(6)
    v = gs_block(rng.standard_normal((200, 2)), [])
    with pytest.raises(RankDeficiencyError):
        gs_block(v @ rng.standard_normal((2, 2)), [v])


def test_gs_orthogonality_and_reconstruction():
    rng = np.random.default_rng(7)
    m, K = 500, 3
    v0 = gs_block(rng.standard_normal((m, K)), [])
    b = rng.standard_normal((m, K))
    v1 = gs_block(b, [v0])
    np.testing.assert_allclose(inner(v1, v1), np.eye(K), atol=1e-10)
    np.testing.assert_allclose(inner(v0, v1), 0, atol=1e-10)
    rec = v0 @ inner(v0, b) + v1 @ inner(v1, b)
    assert np.max(np.abs(rec - b)) <= 1e-10


def test_gs_reduced_drops_exact_null_direction():
    rng = np.random.default_rng(8)
    m = 400
    b = np.column_stack([rng.standard_normal((m, 2)), np.zeros(m)])
    v = gs_block_reduced(b, [])
    assert v.shape == (m, 2)
    np.testing.assert_allclose(inner(v, v), np.eye(2), atol=1e-12)
    np.testing.assert_allclose(v @ inner(v, b), b, atol=1e-10)
    assert gs_block_reduced(v, [v]).shape == (m, 0)


def test_gs_reduced_rank_deficient_stays_orthonormal():
    rng = np.random.default_rng(9)
    m = 400
    v0 = gs_block(rng.standard_normal((m, 3)), [])
    b = rng.standard_normal((m, 3))
    b -= b.mean(axis=1, keepdims=True)  # rows sum to zero: rank 2 up to rounding
    v = gs_block_reduced(b, [v0])
    assert v.shape[1] in (2, 3)
    np.testing.assert_allclose(inner(v, v), np.eye(v.shape[1]), atol=1e-10)
    np.testing.assert_allclose(inner(v0, v), 0, atol=1e-10)
    np.testing.assert_allclose(v0 @ inner(v0, b) + v @ inner(v, b), b, atol=1e-10)


# -- rng -------------------------------------------------------------------

def test_seeded_rng_paths_are_deterministic_and_distinct():
    r = SeededRng(11)
    np.testing.assert_array_equal(r.child(1, 2).normal(5), SeededRng(11, (1, 2)).normal(5))
    assert not np.allclose(r.child(1).normal(5), r.child(2).normal(5))
    assert not np.allclose(SeededRng(1).normal(5), SeededRng(2).normal(5))
