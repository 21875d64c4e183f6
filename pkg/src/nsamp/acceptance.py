"""End-to-end acceptance checks, shared by ``nsamp verify`` and the test suite.

Each check returns a :class:`CheckResult` with the measured quantity, the
tolerance it was compared against and a verdict. ``tol_scale`` multiplies
every tolerance (0 forces failures, which exercises the failure path).
"""
from __future__ import annotations

import functools
import json
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .amp import amp_run
from .dice import dice_run
from .loss import CROSS_ENTROPY, jacobian_from_m, prox_rows
from .model import (SQUARED_PROBLEM, STREAM_INIT, STREAM_OMEGA0, make_instance,
                    sample_ground_truth)
from .numerics import SeededRng, psd_sqrt, sym
from .risk import corollary_error_check, solve_ridge_softmax, theorem3_check
from .state_evolution import (McConfig, deviation_sequence, linear_bound_samples, monte_carlo,
                              psd_margin_with_se, solve_fixed_point, t_map_samples)

#: Monte Carlo setup of the reference fixed points. The deviation sequence
#: decays to ~1e-13, so the fixed point and the prox must be resolved far
#: below the sampling error.
REF_MC = McConfig(200_000, seed=0, num_blocks=8, prox_tol=1e-13)
REF_TOL = 1e-13
ROUNDING_FLOOR = 1e-12


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{self.name:<22} measured={self.measured:<12.6g} tol={self.tolerance:<10.4g} {verdict}"


@functools.lru_cache(maxsize=None)
def reference_fixed_point(lambda0: float, alpha: float = 2.0, K: int = 3):
    return solve_fixed_point(lambda0, alpha, np.eye(K), REF_MC, tol=REF_TOL, max_iter=5000)


def check_scalar_oracle(s: float = 1.0) -> CheckResult:
    t0 = time.perf_counter()
    fp = solve_fixed_point(1.0, 2.0, np.eye(1), McConfig(2000, seed=0, num_blocks=1),
                           tol=1e-12, problem=SQUARED_PROBLEM)
    secs = time.perf_counter() - t0
    eV = abs(fp.Vstar[0, 0] - (1 + np.sqrt(2)))
    eR = abs(fp.rho_at - (3 - 2 * np.sqrt(2)))
    err = max(eV, eR)
    tol = 1e-6 * s
    return CheckResult("1 scalar-oracle", err, tol, err <= tol and secs < 1.0,
                       {"V": fp.Vstar[0, 0], "rho_at": fp.rho_at, "seconds": secs})


def check_prox_jacobian(s: float = 1.0, n_inst: int = 1000) -> CheckResult:
    t0 = time.perf_counter()
    rng = SeededRng(2024).generator()
    h = 1e-5
    worst_res = worst_id = worst_fd = 0.0
    for i in range(n_inst):
        K = (2, 3, 5)[i % 3]
        A = rng.standard_normal((K, K))
        V = A @ A.T / K + 0.1 * np.eye(K)
        gamma = 2.0 * rng.standard_normal((1, K))
        y = np.zeros((1, K))
        y[0, rng.integers(K)] = 1.0
        m, _, res = prox_rows(gamma, y, V)
        f = m - gamma
        ident = f + CROSS_ENTROPY.grad(m, y) @ np.linalg.inv(V)
        J = jacobian_from_m(m, y, V)[0]
        # central differences of f in every input coordinate, solved tightly
        E = h * np.eye(K)
        gp, gm = gamma + E, gamma - E
        mp, _, _ = prox_rows(gp, np.repeat(y, K, 0), V, tol=1e-14)
        mm, _, _ = prox_rows(gm, np.repeat(y, K, 0), V, tol=1e-14)
        fd = ((mp - gp) - (mm - gm)) / (2 * h)
        worst_res = max(worst_res, res)
        worst_id = max(worst_id, float(np.max(np.abs(ident))))
        worst_fd = max(worst_fd, float(np.max(np.abs(fd - J))))
    secs = time.perf_counter() - t0
    ok = worst_res <= 1e-10 * s and worst_id <= 1e-8 * s and worst_fd <= 1e-5 * s and secs < 10
    return CheckResult("2 prox-jacobian", worst_fd, 1e-5 * s, ok,
                       {"max_residual": worst_res, "max_identity_err": worst_id,
                        "max_fd_err": worst_fd, "seconds": secs})


def check_stein(s: float = 1.0) -> CheckResult:
    fp = reference_fixed_point(1.0)
    mcs = monte_carlo(McConfig(100_000, seed=31, num_blocks=8, prox_tol=1e-12), fp.C0)
    gamma = mcs.G0 @ fp.Bstar + mcs.G @ psd_sqrt(fp.Cstar, tol=1e-8)
    f, fprime = mcs.denoise(gamma, fp.Vstar)
    sC = psd_sqrt(fp.Cstar, tol=1e-8)
    D = mcs.G[:, :, None] * f[:, None, :] - np.einsum("ij,njk->nik", sC, fprime)
    mu = D.mean(axis=0)
    se = D.std(axis=0, ddof=1) / np.sqrt(D.shape[0])
    z = float(np.max(np.abs(mu) / se))
    return CheckResult("3 stein", z, 4.0 * s, z <= 4.0 * s, {"mean": mu.tolist(), "se": se.tolist()})


def random_ordered_pair(Cstar, rng: np.random.Generator):
    """``0 <= Y <= X <= C*`` built as ``C*^{1/2} A C*^{1/2}`` with ``0 <= B <= A <= I``."""
    K = Cstar.shape[0]
    U, _ = np.linalg.qr(rng.standard_normal((K, K)))
    A = (U * rng.uniform(0, 1, K)) @ U.T
    W, _ = np.linalg.qr(rng.standard_normal((K, K)))
    Wm = (W * rng.uniform(0, 1, K)) @ W.T
    sA = psd_sqrt(sym(A))
    Bm = sA @ Wm @ sA
    sC = psd_sqrt(Cstar, tol=1e-8)
    return sym(sC @ A @ sC), sym(sC @ Bm @ sC)


def check_lemma2(s: float = 1.0, n_pairs: int = 100, mc_samples: int = 20_000) -> CheckResult:
    fp = reference_fixed_point(1.0)
    mc = McConfig(mc_samples, seed=77, num_blocks=4, prox_tol=1e-12)
    rng = SeededRng(4).generator()
    worst_mono = worst_up = np.inf
    raw = []
    for _ in range(n_pairs):
        X, Y = random_ordered_pair(fp.Cstar, rng)
        D = t_map_samples(X, fp, mc) - t_map_samples(Y, fp, mc)
        U = linear_bound_samples(X - Y, fp, mc) - D
        m1, se1 = psd_margin_with_se(D)
        m2, se2 = psd_margin_with_se(U)
        # score in standard errors; exact null directions sit at rounding level
        worst_mono = min(worst_mono, (m1 + ROUNDING_FLOOR) / max(se1, 1e-300))
        worst_up = min(worst_up, (m2 + ROUNDING_FLOOR) / max(se2, 1e-300))
        raw.append((m1, se1, m2, se2))
    worst = float(min(worst_mono, worst_up))
    return CheckResult("4 lemma2", worst, -4.0 * s, worst >= -4.0 * s,
                       {"worst_monotonicity_z": float(worst_mono), "worst_upper_z": float(worst_up),
                        "min_margins": [float(min(r[0] for r in raw)), float(min(r[2] for r in raw))]})


def check_se_rate(s: float = 1.0) -> CheckResult:
    fp = reference_fixed_point(1.0)
    ds = deviation_sequence(fp, T_steps=11)
    r = np.array(ds.ratios[4:10])        # t = 5..10
    lo, hi = fp.rho_at - 0.03 * s, fp.rho_at + 0.02 * s
    worst = float(np.max(np.abs(r - fp.rho_at)))
    ok = bool(np.all((r >= lo) & (r <= hi)))
    return CheckResult("5 se-rate", worst, 0.02 * s, ok,
                       {"ratios": r.tolist(), "rho_at": fp.rho_at,
                        "delta_norms": [float(np.linalg.norm(D)) for D in ds.deltas]})


def check_fig1(s: float = 1.0, grid=(1.0, 0.3, 0.1), d_direct: int = 4000, d_dice: int = 100_000) -> CheckResult:
    t0 = time.perf_counter()
    rows = {}
    worst = 0.0
    mem_ok = True
    for lam in grid:
        fp = reference_fixed_point(lam)
        rng = SeededRng(600)
        gt, data = make_instance(d_direct, 3, 2.0, rng)
        tr = amp_run(gt, data, fp, 15, rng.child(STREAM_INIT), track_grad=False)
        del data
        r_dir = tr.mean_ratio(10, 15)
        rng2 = SeededRng(601)
        gt2 = sample_ground_truth(d_dice, 3, rng2.child(STREAM_OMEGA0))
        tr2 = dice_run(gt2, fp, 15, rng2.child(STREAM_INIT))
        r_dice = tr2.mean_ratio(10, 15)
        peak = tr2.summary["peak_bytes"]
        nd_bytes = 8 * tr2.summary["n"] * d_dice
        mem_ok &= peak < 4 * 2 ** 30 and peak < nd_bytes
        worst = max(worst, abs(r_dir - fp.rho_at), abs(r_dice - fp.rho_at))
        rows[lam] = {"rho_at": fp.rho_at, "direct": r_dir, "dice": r_dice, "dice_peak_bytes": peak}
    rhos = [rows[lam]["rho_at"] for lam in sorted(grid, reverse=True)]
    increasing = all(b > a for a, b in zip(rhos, rhos[1:]))
    secs = time.perf_counter() - t0
    ok = worst <= 0.05 * s and increasing and mem_ok and secs < 600
    return CheckResult("6 fig1", worst, 0.05 * s, ok,
                       {"rows": rows, "rho_increasing": increasing, "memory_ok": bool(mem_ok), "seconds": secs})


def check_prop3(s: float = 1.0) -> CheckResult:
    mc = McConfig(50_000, seed=3, num_blocks=4, prox_tol=1e-12)
    table = {}
    for lam in (0.1, 0.3, 1.0, 3.0, 10.0):
        for a in (0.5, 1.0, 2.0):
            table[f"{lam},{a}"] = solve_fixed_point(lam, a, np.eye(3), mc, tol=1e-6, max_iter=3000).rho_at
    worst = float(max(table.values()))
    return CheckResult("7 prop3", worst, 1.0 * s, worst < 1.0 * s, {"rho_at": table})


def check_decoupling(s: float = 1.0, d: int = 10_000, T: int = 8) -> CheckResult:
    fp = reference_fixed_point(1.0)
    rng = SeededRng(800)
    gt, data = make_instance(d, 3, 2.0, rng)
    tr = amp_run(gt, data, fp, T, rng.child(STREAM_INIT), track_grad=False)
    del data
    eB = max(float(np.max(np.abs(B - fp.Bstar))) for B in tr.B)
    eC = max(float(np.max(np.abs(C - fp.Cstar))) for C in tr.C)
    worst = max(eB, eC)
    return CheckResult("8 decoupling", worst, 0.05 * s, worst <= 0.05 * s, {"B_err": eB, "C_err": eC})


@functools.lru_cache(maxsize=None)
def _thm3_run(d: int = 4000, T: int = 30):
    fp = reference_fixed_point(1.0)
    rng = SeededRng(900)
    gt, data = make_instance(d, 3, 2.0, rng)
    rep = solve_ridge_softmax(data.X, data.y, fp.lambda0, tol=1e-8)
    tr = amp_run(gt, data, fp, T, rng.child(STREAM_INIT), keep_iterates=True, track_grad=False)
    chk = theorem3_check(rep.omega_star, tr, gt, fp, X=data.X, oracle_grad_norm=rep.grad_norm)
    cor = corollary_error_check(rep.omega_star, gt, fp)
    return chk, cor, rep.grad_norm


def check_theorem3(s: float = 1.0) -> CheckResult:
    chk, _, gn = _thm3_run()
    ok = chk["final_dist"] <= 0.05 * s and chk["all_hold"]
    return CheckResult("9 theorem3", chk["final_dist"], 0.05 * s, ok,
                       {"bound_holds_every_t": chk["all_hold"], "x_norm": chk["x_norm"],
                        "solver_grad_norm": gn,
                        "dist": chk["dist"][::5], "bound": chk["bound"][::5]})


def check_corollary(s: float = 1.0) -> CheckResult:
    _, cor, _ = _thm3_run()
    return CheckResult("10 corollary", cor["rel_gap"], 0.05 * s, cor["rel_gap"] <= 0.05 * s, cor)


def check_dice_vs_direct(s: float = 1.0, d: int = 2000, R: int = 20, T: int = 8) -> CheckResult:
    fp = reference_fixed_point(1.0)
    direct, dice = [], []
    for r in range(R):
        rng = SeededRng(1100 + r)
        gt, data = make_instance(d, 3, 2.0, rng)
        direct.append(amp_run(gt, data, fp, T, rng.child(STREAM_INIT), track_grad=False).statistics())
        rng2 = SeededRng(2100 + r)
        gt2 = sample_ground_truth(d, 3, rng2.child(STREAM_OMEGA0))
        dice.append(dice_run(gt2, fp, T, rng2.child(STREAM_INIT), measure_memory=False).statistics())
    worst, worst_key = 0.0, None
    for key in direct[0]:
        a = np.array([x[key] for x in direct])
        b = np.array([x[key] for x in dice])
        se = np.sqrt(a.var(axis=0, ddof=1) / R + b.var(axis=0, ddof=1) / R)
        z = np.abs(a.mean(axis=0) - b.mean(axis=0)) / se
        if np.max(z) > worst:
            worst, worst_key = float(np.max(z)), f"{key}@t={int(np.argmax(z)) + 1}"
    return CheckResult("11 dice-vs-direct", worst, 3.0 * s, worst <= 3.0 * s,
                       {"worst_statistic": worst_key, "n_statistics": len(direct[0]) * T})


def _run_cli(args, threads: int, cwd: Path) -> None:
    env = dict(os.environ, AMP_THREADS=str(threads))
    subprocess.run([sys.executable, "-m", "nsamp", *args], cwd=cwd, env=env, check=True,
                   stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)


def check_reproducibility(s: float = 1.0, threads=(1, 4, 8)) -> CheckResult:
    cases = {
        "fixed-point": ["fixed-point", "--mc-samples", "20000", "--seed", "7", "--lambda0", "1"],
        "amp": ["amp", "--d", "400", "--t-max", "6", "--mc-samples", "20000", "--seed", "7"],
        "dice": ["dice", "--d", "400", "--t-max", "6", "--mc-samples", "20000", "--seed", "7"],
    }
    mismatches = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for name, args in cases.items():
            outs = []
            for th in threads:
                out = tmp / f"{name}-{th}.out"
                _run_cli([*args, "--output", str(out)], th, tmp)
                blob = out.read_bytes()
                summ = out.with_name(out.name + ".summary.json")
                if summ.exists():
                    # wall time and allocator peak are measurements of the run, not model output
                    meta = json.loads(summ.read_text())
                    for k in ("peak_bytes", "seconds"):
                        meta.pop(k, None)
                    blob += json.dumps(meta, sort_keys=True).encode()
                outs.append(blob)
            if any(o != outs[0] for o in outs[1:]):
                mismatches.append(name)
    # exact equality has no tolerance to scale
    return CheckResult("12 reproducibility", float(len(mismatches)), 0.0, not mismatches,
                       {"mismatched": mismatches, "threads": list(threads)})


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "scalar-oracle": check_scalar_oracle,
    "prox-jacobian": check_prox_jacobian,
    "stein": check_stein,
    "lemma2": check_lemma2,
    "se-rate": check_se_rate,
    "fig1": check_fig1,
    "prop3": check_prop3,
    "decoupling": check_decoupling,
    "theorem3": check_theorem3,
    "corollary": check_corollary,
    "dice-vs-direct": check_dice_vs_direct,
    "reproducibility": check_reproducibility,
}


def run_checks(names=None, tol_scale: float = 1.0, echo: Callable[[str], None] | None = None) -> list[CheckResult]:
    out = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        res = CHECKS[name](tol_scale)
        res.seconds = time.perf_counter() - t0
        if echo:
            echo(res.line() + f" ({res.seconds:.1f}s)")
        out.append(res)
    return out
