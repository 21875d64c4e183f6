import dataclasses

import numpy as np
import pytest

from nsamp.amp import amp_init, amp_run, amp_step, gradient_norm
from nsamp.loss import CROSS_ENTROPY
from nsamp.model import STREAM_INIT, make_instance
from nsamp.numerics import SeededRng, inner
from nsamp.state_evolution import McConfig, solve_fixed_point


@pytest.fixture(scope="module")
def fp():
    return solve_fixed_point(1.0, 2.0, np.eye(3), McConfig(20_000, seed=5), tol=1e-10)


@pytest.fixture(scope="module")
def instance():
    return make_instance(2000, 3, 2.0, SeededRng(3))


@pytest.fixture(scope="module")
def traj(fp, instance):
    gt, ds = instance
    return amp_run(gt, ds, fp, 15, SeededRng(3).child(STREAM_INIT))


def test_init_overlaps(fp):
    gt, _ = make_instance(10_000, 3, 0.01, SeededRng(4))
    st = amp_init(gt, fp, SeededRng(5))
    np.testing.assert_allclose(inner(gt.r0, st.omega), fp.Bstar, atol=5 / np.sqrt(gt.d))
    psi = st.omega - gt.r0 @ fp.Bstar
    np.testing.assert_allclose(inner(psi, psi), fp.Cstar, atol=0.05)
    np.testing.assert_array_equal(st.Q, fp.onsager)


def test_init_fully_random(fp):
    gt, _ = make_instance(500, 3, 0.1, SeededRng(6))
    stub = dataclasses.replace(fp, Bstar=np.zeros((3, 3)), Cstar=np.eye(3))
    st = amp_init(gt, stub, SeededRng(7))
    np.testing.assert_allclose(st.omega, SeededRng(7).normal((500, 3)), atol=1e-14)


def test_zero_denoiser_linear_recursion(fp, instance):
    gt, ds = instance
    st = amp_init(gt, fp, SeededRng(8), ds.n)
    w1 = st.omega.copy()

    def zero(gamma, y, warm):
        return np.zeros_like(gamma), None

    for _ in range(3):
        st, f = amp_step(st, ds.X, ds.y, fp, denoiser=zero)
    expected = w1 @ np.linalg.matrix_power(-fp.alpha * fp.onsager, 3)
    np.testing.assert_allclose(st.omega, expected, atol=1e-12)


def test_first_step_decoupling(fp):
    gt, ds = make_instance(4000, 3, 2.0, SeededRng(9))
    st = amp_init(gt, fp, SeededRng(9).child(STREAM_INIT), ds.n)
    st, f = amp_step(st, ds.X, ds.y, fp)
    np.testing.assert_allclose(inner(gt.r0, st.omega), fp.Bstar, atol=0.05)
    np.testing.assert_allclose(inner(f, f), fp.Cstar / fp.alpha, atol=0.05)


def test_step_distances_decrease(traj):
    s = np.asarray(traj.omega_step)
    assert np.all(np.diff(s[2:]) < 0)


def test_gamma_side_tracks_omega_side(traj):
    q = np.asarray(traj.gamma_step) / np.asarray(traj.omega_step)
    assert np.all((q > 0.5) & (q < 2.0))


def test_ratio_near_rho(traj, fp):
    # d = 2000 is half the protocol size; tolerance as in the protocol
    assert abs(traj.mean_ratio(10, 15) - fp.rho_at) <= 0.05
    assert np.isnan(traj.ratio[0])


def test_records_and_csv(traj):
    assert traj.T == 15
    assert len(traj.B) == len(traj.C) == len(traj.grad_norm) == 15
    text = traj.to_csv("hdr")
    lines = text.split("\n")
    assert lines[0] == "# hdr" and lines[-1] == ""
    assert "\r" not in text
    assert lines[1].split(",") == traj.header()
    assert len(lines[1].split(",")) == 5 + 2 * 9
    row = lines[2].split(",")
    assert row[0] == "1" and float(row[1]) == traj.omega_step[0]
    stats = traj.statistics()
    assert len(stats) == 20 and all(len(v) == 15 for v in stats.values())


def test_gradient_norm_definition(instance):
    gt, ds = instance
    w = np.zeros((gt.d, 3))
    G = ds.X.T @ (np.full_like(ds.y, 1 / 3) - ds.y)
    assert gradient_norm(w, ds.X, ds.y, 1.0) == pytest.approx(np.linalg.norm(G) / np.sqrt(gt.d), rel=1e-12)
    w = SeededRng(10).normal((gt.d, 3))
    G = 0.7 * w + ds.X.T @ CROSS_ENTROPY.grad(ds.X @ w, ds.y)
    assert gradient_norm(w, ds.X, ds.y, 0.7) == pytest.approx(np.linalg.norm(G) / np.sqrt(gt.d), rel=1e-12)


def test_amp_run_rejects_mismatch(fp, instance):
    gt, ds = instance
    gt_small, _ = make_instance(100, 3, 2.0, SeededRng(1))
    with pytest.raises(ValueError):
        amp_run(gt_small, ds, fp, 2, SeededRng(0))


def test_amp_run_deterministic(fp):
    gt, ds = make_instance(300, 3, 2.0, SeededRng(11))
    a = amp_run(gt, ds, fp, 4, SeededRng(12)).to_csv()
    b = amp_run(gt, ds, fp, 4, SeededRng(12)).to_csv()
    assert a == b
