import numpy as np
import pytest

from nsamp import dice
from nsamp.amp import amp_init
from nsamp.dice import D_SIDE, N_SIDE, basis_gram_error, dice_init, dice_run, dice_step
from nsamp.model import sample_ground_truth
from nsamp.numerics import SeededRng
from nsamp.state_evolution import McConfig, solve_fixed_point


@pytest.fixture(scope="module")
def fp():
    return solve_fixed_point(1.0, 2.0, np.eye(3), McConfig(20_000, seed=5), tol=1e-10)


def minus_identity(gamma, y, warm):
    return -gamma, None


def test_init_basis_and_shared_omega(fp):
    gt = sample_ground_truth(3000, 3, SeededRng(1))
    rng = SeededRng(2)
    st = dice_init(gt, fp, rng)
    v0 = st.blocks[0].v
    np.testing.assert_allclose(st.ip(v0, v0), np.eye(3), atol=1e-14)
    omega1 = amp_init(gt, fp, rng.child(dice._S_INIT)).omega
    np.testing.assert_array_equal(st.m_vec, np.sqrt(1 + fp.alpha) * omega1)
    g0 = st.g0
    assert g0.shape == (st.n, 3)
    np.testing.assert_allclose(g0.T @ g0 / st.n, np.eye(3), atol=5 / np.sqrt(st.n))
    assert st.y.shape == (st.n, 3) and np.all(st.y.sum(axis=1) == 1)


def _embed(x, side, n, d):
    full = np.zeros((n + d, x.shape[1]))
    if side == N_SIDE:
        full[:n] = x
    else:
        full[n:] = x
    return full


def test_matches_full_length_unroll(fp):
    # Oracle: the recursion on full m-vectors with full Gaussians; the dice keeps
    # half-length blocks and drops terms off the read-out half.
    gt = sample_ground_truth(67, 3, SeededRng(3))
    rng = SeededRng(4)
    st = dice_init(gt, fp, rng)
    n, d, m = st.n, st.d, st.m_dim
    assert 195 <= m <= 205
    a1 = np.sqrt(1 + fp.alpha)
    filler = np.random.default_rng(0)
    ip = lambda a, b: a.T @ b / m  # noqa: E731
    m_cur = _embed(st.m_vec, D_SIDE, n, d)
    m_prev = np.zeros_like(m_cur)
    for s in range(1, 6):
        h_dice = dice_step(st, fp, rng, denoiser=minus_identity)
        vs, uh = [], []
        for blk in st.blocks:
            v = _embed(blk.v, blk.side, n, d)
            k = v.shape[1]
            other = 1 - blk.side
            raw_other = rng.child(dice._S_U, blk.s).normal((st.side_len(other), k))
            u_other = _embed(raw_other, other, n, d)
            u_same = _embed(filler.standard_normal((st.side_len(blk.side), k)), blk.side, n, d)
            u = u_other + u_same
            vs.append(v)
            for _ in range(2):
                for w in vs:
                    u = u - w @ ip(w, u)
            uh.append(u)
        V = np.concatenate(vs, axis=1)
        np.testing.assert_allclose(ip(V, V), np.eye(V.shape[1]), atol=1e-10)
        np.testing.assert_allclose(V @ ip(V, m_cur), m_cur, atol=1e-10)
        h = np.zeros((m, 3))
        for blk, v, u in zip(st.blocks, vs, uh):
            h += (u + v @ blk.Z / np.sqrt(m)) @ ip(v, m_cur)
            if blk.s < s:
                h += v @ ip(u, m_cur)
        if s > 1:
            Qm = fp.alpha * fp.onsager / a1 if s % 2 == 0 else np.eye(3) / a1
            h -= m_prev @ Qm
        if s % 2 == 1:
            np.testing.assert_allclose(h_dice, h[:n], atol=1e-10)
            m_next = _embed(a1 * -h[:n], N_SIDE, n, d)
        else:
            np.testing.assert_allclose(h_dice, h[n:], atol=1e-10)
            m_next = _embed(a1 * h[n:], D_SIDE, n, d)
        m_prev, m_cur = m_cur, m_next


def test_orthonormality_and_span_over_30_steps(fp):
    gt = sample_ground_truth(1000, 3, SeededRng(5))
    rng = SeededRng(6)
    st = dice_init(gt, fp, rng)
    for _ in range(30):
        dice_step(st, fp, rng)
        assert basis_gram_error(st) <= 1e-8
        side = st.blocks[-1].side
        vs = [b.v for b in st.blocks if b.side == side]
        V = np.concatenate(vs, axis=1)
        rec = V @ st.ip(V, st.m_prev)
        assert np.max(np.abs(rec - st.m_prev)) <= 1e-8


def test_first_gamma_gram(fp):
    gt = sample_ground_truth(10_000, 3, SeededRng(7))
    rng = SeededRng(8)
    st = dice_init(gt, fp, rng)
    gamma = dice_step(st, fp, rng)
    G = gamma.T @ gamma / st.n
    np.testing.assert_allclose(G, fp.Bstar.T @ fp.Bstar + fp.Cstar, atol=0.05)


def test_run_schema_and_no_dense_allocation(fp):
    gt = sample_ground_truth(4000, 3, SeededRng(9))
    tr = dice_run(gt, fp, 6, SeededRng(10))
    assert tr.T == 6 and len(tr.gamma_step) == 6 and len(tr.B) == 6
    s = tr.summary
    assert s["engine"] == "dice" and s["n"] == 8000
    assert s["basis_gram_error"] <= 1e-8
    assert s["peak_bytes"] < 0.05 * s["n"] * s["d"] * 8
    assert tr.header() == tr.to_csv().split("\n")[0].split(",")


def _peak(fp, d, T):
    gt = sample_ground_truth(d, 3, SeededRng(11))
    return dice_run(gt, fp, T, SeededRng(12)).summary["peak_bytes"]


def test_peak_memory_linear_in_size(fp):
    p1, p2 = _peak(fp, 2000, 6), _peak(fp, 4000, 6)
    assert 1.6 < p2 / p1 < 2.4


def test_peak_memory_growth_bounded_by_basis_storage(fp):
    # each AMP iteration stores two blocks of m x K floats (v plus its u_hat);
    # allow 1.5x for transient copies
    d = 2000
    m, K = 3 * d, 3
    base = _peak(fp, d, 6)
    prev = base
    for T in (12, 18):
        p = _peak(fp, d, T)
        assert prev <= p <= base + 1.5 * 2 * (T - 6) * m * K * 8
        prev = p


def test_reduced_flag_runs(fp):
    gt = sample_ground_truth(500, 3, SeededRng(13))
    tr = dice_run(gt, fp, 3, SeededRng(14), reduced=True, measure_memory=False)
    assert tr.summary["reduced"] and tr.summary["peak_bytes"] is None


def test_dice_deterministic(fp):
    gt = sample_ground_truth(300, 3, SeededRng(15))
    a = dice_run(gt, fp, 4, SeededRng(16), measure_memory=False).to_csv()
    b = dice_run(gt, fp, 4, SeededRng(16), measure_memory=False).to_csv()
    assert a == b
