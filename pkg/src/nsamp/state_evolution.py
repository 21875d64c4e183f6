"""Monte Carlo state evolution over (Y, G0, G).

Everything here is an average over a fixed, seeded sample: the same
``McConfig`` reproduces the same draws, which turns the fixed-point sweep,
the contraction map and the stability radius into deterministic functions
(common random numbers).
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .loss import jacobian_from_m, prox_rows
from .model import PROBLEMS, SOFTMAX_PROBLEM, Problem
from .numerics import (
    NotPositiveDefiniteError,
    NumericsError,
    SeededRng,
    chol_lower,
    psd_order_margin,
    psd_sqrt,
    spectral_radius,
    sym,
)

log = logging.getLogger(__name__)

# child stream tags under the Monte Carlo seed
_BASE, _GPRIME, _GDPRIME, _FRESH, _PSI = 0, 1, 2, 3, 100
ORDER_TOL = 1e-8


class FixedPointError(RuntimeError):
    """The damped fixed-point iteration failed; ``partial`` holds the last iterate."""

    def __init__(self, message: str, partial: "FixedPoint | None" = None):
        super().__init__(message)
        self.partial = partial


class OrderingError(NumericsError):
    pass


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("AMP_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class McConfig:
    num_samples: int = 200_000
    seed: int = 0
    num_blocks: int = 8
    #: Newton stationarity tolerance inside the expectations; tighter than
    #: the public prox default so that estimator differences resolve far
    #: below Monte Carlo error.
    prox_tol: float = 1e-12

    def __post_init__(self):
        if self.num_samples < 1 or self.num_blocks < 1:
            raise ValueError("num_samples and num_blocks must be >= 1")

    def block_sizes(self) -> list[int]:
        nb = min(self.num_blocks, self.num_samples)
        base, extra = divmod(self.num_samples, nb)
        return [base + (b < extra) for b in range(nb)]

    def with_seed(self, seed: int) -> "McConfig":
        return McConfig(self.num_samples, seed, self.num_blocks, self.prox_tol)


def _pmap(fn: Callable[[int], object], nblocks: int, threads: int | None = None) -> list:
    threads = threads or default_threads()
    if threads <= 1 or nblocks <= 1:
        return [fn(b) for b in range(nblocks)]
    with ThreadPoolExecutor(max_workers=min(threads, nblocks)) as ex:
        return list(ex.map(fn, range(nblocks)))


class MonteCarlo:
    """Seeded sample of ``(Y, G0, G)`` and of extra Gaussian rows.

    ``Y`` is drawn from the problem's channel at ``theta = G0 sqrt(C0)``.
    Arrays are generated once per block from that block's sub-stream and
    concatenated in block order.
    """

    def __init__(self, mc: McConfig, C0: np.ndarray, problem: Problem = SOFTMAX_PROBLEM):
        self.mc = mc
        self.C0 = np.array(C0, dtype=float)
        self.K = self.C0.shape[0]
        self.problem = problem
        self.root = SeededRng(mc.seed)
        self.sizes = mc.block_sizes()
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        sC0 = psd_sqrt(self.C0)

        def draw(b):
            rng = self.root.child(_BASE, b)
            G0 = rng.child(0).normal((self.sizes[b], self.K))
            G = rng.child(1).normal((self.sizes[b], self.K))
            Y = problem.channel.sample(G0 @ sC0, rng.child(2))
            return G0, G, Y

        parts = _pmap(draw, len(self.sizes))
        self.G0 = np.concatenate([p[0] for p in parts])
        self.G = np.concatenate([p[1] for p in parts])
        self.Y = np.concatenate([p[2] for p in parts])
        self._extra: dict[tuple, np.ndarray] = {}
        # prox warm starts; callers reset them so results never depend on call history
        self._warm: dict[str, np.ndarray] = {}
        self._fp_cache: dict[bytes, "Expectations"] = {}

    @property
    def N(self) -> int:
        return self.mc.num_samples

    def extra(self, *tag: int) -> np.ndarray:
        """Additional standard Gaussian ``N x K`` rows addressed by ``tag``."""
        if tag not in self._extra:
            parts = _pmap(
                lambda b: self.root.child(*tag, b).normal((self.sizes[b], self.K)), len(self.sizes)
            )
            self._extra[tag] = np.concatenate(parts)
        return self._extra[tag]

    def reset_warm(self) -> None:
        self._warm.clear()

    def denoise(self, gamma: np.ndarray, V: np.ndarray, warm: str | None = None,
                theta0: np.ndarray | None = None):
        """Row-wise prox at weight ``V``; returns ``(f, f')`` per sample.

        Newton starts from ``theta0`` if given, else from the last solution
        stored under ``warm``.
        """
        loss = self.problem.loss
        if theta0 is None and warm:
            theta0 = self._warm.get(warm)

        def run(b):
            sl = slice(self.offsets[b], self.offsets[b + 1])
            t0 = None if theta0 is None else theta0[sl]
            m, _, _ = prox_rows(gamma[sl], self.Y[sl], V, loss, tol=self.mc.prox_tol, theta0=t0)
            return m

        m = np.concatenate(_pmap(run, len(self.sizes)))
        if warm:
            self._warm[warm] = m
        return m - gamma, jacobian_from_m(m, self.Y, V, loss)


_MC_CACHE: dict[tuple, MonteCarlo] = {}


def monte_carlo(mc: McConfig, C0, problem: Problem = SOFTMAX_PROBLEM) -> MonteCarlo:
    C0 = np.asarray(C0, dtype=float)
    key = (mc, problem.name, C0.tobytes())
    if key not in _MC_CACHE:
        if len(_MC_CACHE) > 6:
            _MC_CACHE.pop(next(iter(_MC_CACHE)))
        _MC_CACHE[key] = MonteCarlo(mc, C0, problem)
    return _MC_CACHE[key]


def mean_and_se(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean over axis 0 and its standard error."""
    n = x.shape[0]
    mu = x.mean(axis=0)
    se = x.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full_like(mu, np.inf)
    return mu, se


@dataclass
class Expectations:
    Q: np.ndarray
    M: np.ndarray
    S: np.ndarray
    Q_se: np.ndarray
    M_se: np.ndarray
    S_se: np.ndarray
    f: np.ndarray = field(repr=False)
    fprime: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)


def expectations(B, C, V, C0, mc: McConfig | MonteCarlo, problem: Problem = SOFTMAX_PROBLEM,
                 warm: str | None = None) -> Expectations:
    """``E[f'(Gamma)]``, ``E[G0^T f(Gamma)]`` and ``E[f^T f]`` at ``Gamma = G0 B + G sqrt(C)``."""
    mcs = mc if isinstance(mc, MonteCarlo) else monte_carlo(mc, C0, problem)
    gamma = mcs.G0 @ np.asarray(B, float) + mcs.G @ psd_sqrt(C, tol=ORDER_TOL)
    f, fp = mcs.denoise(gamma, V, warm)
    Q, Qse = mean_and_se(fp)
    M, Mse = mean_and_se(mcs.G0[:, :, None] * f[:, None, :])
    S, Sse = mean_and_se(f[:, :, None] * f[:, None, :])
    return Expectations(Q, M, S, Qse, Mse, Sse, f, fp, gamma)


@dataclass
class FixedPoint:
    K: int
    alpha: float
    lambda0: float
    C0: np.ndarray
    Bstar: np.ndarray
    Cstar: np.ndarray
    Vstar: np.ndarray
    Qstar: np.ndarray
    rho_at: float
    residuals: dict
    mc_samples: int
    seed: int
    num_blocks: int = 8
    prox_tol: float = 1e-12
    problem: str = "softmax"
    converged: bool = True
    iterations: int = 0

    @property
    def mc(self) -> McConfig:
        return McConfig(self.mc_samples, self.seed, self.num_blocks, self.prox_tol)

    @property
    def problem_obj(self) -> Problem:
        return PROBLEMS[self.problem]

    @property
    def onsager(self) -> np.ndarray:
        """Onsager matrix satisfying ``alpha Q V* = lambda0 I - V*`` exactly.

        Equal to ``Qstar`` up to the solver tolerance; AMP uses this form so
        that its fixed point coincides with the regularized minimizer to
        rounding.
        """
        return (self.lambda0 * np.linalg.inv(self.Vstar) - np.eye(self.K)) / self.alpha

    def to_dict(self) -> dict:
        arr = lambda a: np.asarray(a, float).tolist()  # noqa: E731
        return {
            "K": self.K, "alpha": self.alpha, "lambda0": self.lambda0, "C0": arr(self.C0),
            "Bstar": arr(self.Bstar), "Cstar": arr(self.Cstar), "Vstar": arr(self.Vstar),
            "Qstar": arr(self.Qstar), "rho_at": self.rho_at, "residuals": self.residuals,
            "mc_samples": self.mc_samples, "seed": self.seed, "num_blocks": self.num_blocks,
            "prox_tol": self.prox_tol, "problem": self.problem, "converged": self.converged,
            "iterations": self.iterations,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "FixedPoint":
        d = {k: v for k, v in d.items() if k != "_meta"}
        for k in ("C0", "Bstar", "Cstar", "Vstar", "Qstar"):
            d[k] = np.array(d[k], dtype=float)
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "FixedPoint":
        return cls.from_dict(json.loads(s))


def _fp_map(B, C, V, lambda0, alpha, mcs, warm=None):
    """One sweep of the fixed-point equations; returns new iterates and the raw V."""
    K = V.shape[0]
    E = expectations(B, C, V, mcs.C0, mcs, mcs.problem, warm=warm)
    # lambda0 I - alpha Q V rather than lambda0 (I + alpha Q)^{-1}: same fixed
    # point, no inverse, so no pole where I + alpha Q(V) is singular
    V_raw = lambda0 * np.eye(K) - alpha * E.Q @ V
    V_new = sym(V_raw)
    B_new = (alpha / lambda0) * E.M @ V_new
    C_new = sym(alpha * E.S)
    return B_new, C_new, V_new, V_raw, E


def _residuals(B, C, V, lambda0, alpha, E) -> dict:
    K = V.shape[0]
    v2 = float(np.linalg.norm(V, 2))
    # *_se: Frobenius-scale standard error of the Monte Carlo part of each residual
    return {
        "V": float(np.linalg.norm(V - (lambda0 * np.eye(K) - alpha * E.Q @ V))),
        "B": float(np.linalg.norm(B - (alpha / lambda0) * E.M @ V)),
        "C": float(np.linalg.norm(C - alpha * E.S)),
        "V_se": float(alpha * np.linalg.norm(E.Q_se) * v2),
        "B_se": float(alpha / lambda0 * np.linalg.norm(E.M_se) * v2),
        "C_se": float(alpha * np.linalg.norm(E.S_se)),
    }


def solve_fixed_point(lambda0: float, alpha: float, C0, mc: McConfig = McConfig(),
                      damping: float = 0.5, tol: float = 1e-6, max_iter: int = 1000,
                      problem: Problem | str = SOFTMAX_PROBLEM, with_rho: bool = True) -> FixedPoint:
    """Damped common-random-numbers iteration of the fixed-point system.

    ``V <- lambda0 I - alpha Q V``, ``B <- (alpha / lambda0) M V``,
    ``C <- alpha S``; stops when every Frobenius update is below ``tol``.
    Residuals are reported on the iteration sample (``crn``) and on a fresh
    sample (``fresh``).
    """
    if isinstance(problem, str):
        problem = PROBLEMS[problem]
    pname = next(k for k, v in PROBLEMS.items() if v is problem)
    C0 = np.array(C0, dtype=float)
    K = C0.shape[0]

    def partial(B, C, V, Q, it, res):
        return FixedPoint(K, alpha, lambda0, C0, B, C, V, Q, float("nan"), res, mc.num_samples,
                          mc.seed, mc.num_blocks, mc.prox_tol, pname, False, it)

    if not (lambda0 > 0 and alpha > 0):
        raise FixedPointError(
            f"no fixed point with V* > 0 can be located for lambda0={lambda0}, alpha={alpha}",
            partial(np.zeros((K, K)), np.zeros((K, K)), lambda0 * np.eye(K), np.zeros((K, K)), 0, {}),
        )
    mcs = monte_carlo(mc, C0, problem)
    mcs.reset_warm()
    V = lambda0 * np.eye(K)
    B = np.zeros((K, K))
    E0 = expectations(B, np.zeros((K, K)), V, C0, mcs, problem)
    C = sym(alpha * E0.S)
    Q = E0.Q
    eta = float(damping)
    prev_norm, increases = np.inf, 0
    it = 0
    try:
        for it in range(1, max_iter + 1):
            B_new, C_new, V_new, V_raw, E = _fp_map(B, C, V, lambda0, alpha, mcs, warm="fp")
            Q = E.Q
            if np.min(np.linalg.eigvalsh(V_new)) <= 0:
                raise FixedPointError("V lost positive definiteness", partial(B, C, V, Q, it, {}))
            upd = max(np.linalg.norm(B_new - B), np.linalg.norm(C_new - C), np.linalg.norm(V_new - V))
            if not np.isfinite(upd):
                raise FixedPointError("non-finite update", partial(B, C, V, Q, it, {}))
            if upd <= tol:
                B, C, V = B_new, C_new, V_new
                break
            increases = increases + 1 if upd > prev_norm else 0
            prev_norm = upd
            if increases >= 3 and eta > 1 / 16:
                eta /= 2
                increases = 0
                log.info("fixed point: damping reduced to %g", eta)
            B = (1 - eta) * B + eta * B_new
            C = (1 - eta) * C + eta * C_new
            V = (1 - eta) * V + eta * V_new
        else:
            raise FixedPointError(
                f"fixed point did not converge in {max_iter} sweeps (last update {upd:.3e})",
                partial(B, C, V, Q, it, {}),
            )
    except (np.linalg.LinAlgError, NotPositiveDefiniteError) as exc:
        raise FixedPointError(f"fixed-point sweep failed: {exc}", partial(B, C, V, Q, it, {})) from exc

    asym = float(np.max(np.abs(V_raw - V_raw.T)))
    if asym > 1e-6:
        log.warning("raw V update asymmetric by %.3e", asym)
    E = expectations(B, C, V, C0, mcs, problem, warm="fp")
    res = {"crn": _residuals(B, C, V, lambda0, alpha, E), "V_asym": asym}
    fresh = monte_carlo(mc.with_seed(mc.seed + 1_000_003), C0, problem)
    Ef = expectations(B, C, V, C0, fresh, problem)
    res["fresh"] = _residuals(B, C, V, lambda0, alpha, Ef)
    fp = FixedPoint(K, float(alpha), float(lambda0), C0, B, C, V, E.Q, float("nan"), res,
                    mc.num_samples, mc.seed, mc.num_blocks, mc.prox_tol, pname, True, it)
    if with_rho:
        fp.rho_at = rho_at(fp)
    return fp


def _fp_samples(fp: FixedPoint, mc: McConfig | None = None):
    mcs = monte_carlo(mc or fp.mc, fp.C0, fp.problem_obj)
    key = b"".join(np.asarray(a, float).tobytes() for a in (fp.Bstar, fp.Cstar, fp.Vstar))
    if key not in mcs._fp_cache:
        # cold start: the cached value must not depend on earlier calls
        mcs._fp_cache[key] = expectations(fp.Bstar, fp.Cstar, fp.Vstar, fp.C0, mcs, fp.problem_obj)
    return mcs, mcs._fp_cache[key]


def at_matrix(fp: FixedPoint, mc: McConfig | None = None) -> np.ndarray:
    """``alpha E[f' (x) f']`` at the fixed point, a ``K^2 x K^2`` matrix."""
    _, E = _fp_samples(fp, mc)
    K = fp.K
    F = E.fprime
    M = np.einsum("nij,nkl->ikjl", F, F) / F.shape[0]
    return fp.alpha * M.reshape(K * K, K * K)


def rho_at(fp: FixedPoint, C0=None, mc: McConfig | None = None) -> float:
    """Spectral radius of ``alpha E[f'(Gamma*) (x) f'(Gamma*)]``."""
    return spectral_radius(at_matrix(fp, mc))


def _sqrt_ordered(X, Cstar):
    X = sym(np.asarray(X, float))
    lo = psd_order_margin(np.zeros_like(X), X)
    hi = psd_order_margin(X, Cstar)
    if lo < -ORDER_TOL or hi < -ORDER_TOL:
        raise OrderingError(f"T-map requires 0 <= X <= C* (margins {lo:.3e}, {hi:.3e})")
    return psd_sqrt(X, tol=np.inf), psd_sqrt(sym(Cstar - X), tol=np.inf)


def t_map_samples(X, fp: FixedPoint, mc: McConfig | None = None, antithetic: bool = True) -> np.ndarray:
    """Per-sample contributions to the contraction map ``T(X)``.

    ``alpha f(a + G' s)^T f(a + G'' s)`` with ``a = G0 B* + G sqrt(X)`` and
    ``s = sqrt(C* - X)``. With ``antithetic`` each of ``G'`` and ``G''`` is
    paired with its negation, which removes the terms odd in either one;
    this matters when ``C* - X`` is small. The result is symmetrized.
    """
    mcs, E = _fp_samples(fp, mc)
    m_star = E.f + E.gamma  # prox solutions at the fixed point: a history-free warm start
    sX, sD = _sqrt_ordered(X, fp.Cstar)
    a = mcs.G0 @ fp.Bstar + mcs.G @ sX
    b1 = mcs.extra(_GPRIME) @ sD
    b2 = mcs.extra(_GDPRIME) @ sD

    def f_at(gamma):
        return mcs.denoise(gamma, fp.Vstar, theta0=m_star)[0]

    if antithetic:
        f1 = 0.5 * (f_at(a + b1) + f_at(a - b1))
        f2 = 0.5 * (f_at(a + b2) + f_at(a - b2))
    else:
        f1, f2 = f_at(a + b1), f_at(a + b2)
    P = f1[:, :, None] * f2[:, None, :]
    return fp.alpha * 0.5 * (P + np.swapaxes(P, 1, 2))


def t_map(X, fp: FixedPoint, C0=None, mc: McConfig | None = None, antithetic: bool = True) -> np.ndarray:
    """The map ``T(X)`` for ``0 <= X <= C*`` (Monte Carlo estimate)."""
    return t_map_samples(X, fp, mc, antithetic).mean(axis=0)


def linear_bound_samples(D, fp: FixedPoint, mc: McConfig | None = None) -> np.ndarray:
    """Per-sample ``alpha f'(Gamma*)^T D f'(Gamma*)``."""
    _, E = _fp_samples(fp, mc)
    F = E.fprime
    return fp.alpha * np.einsum("nki,kl,nlj->nij", F, np.asarray(D, float), F)


@dataclass
class DeviationSequence:
    deltas: list
    offdiag: list
    ratios: list


def deviation_sequence(fp: FixedPoint, C0=None, mc: McConfig | None = None, T_steps: int = 10,
                       antithetic: bool = True) -> DeviationSequence:
    """``Delta(t) = C* - C(t, t+1)`` with ``C(1, 2) = 0`` and ``C(t+1, t+2) = T(C(t, t+1))``."""
    X = np.zeros((fp.K, fp.K))
    deltas, offdiag = [], []
    for t in range(1, T_steps + 1):
        offdiag.append(X)
        deltas.append(fp.Cstar - X)
        if t < T_steps:
            X = t_map(X, fp, mc=mc, antithetic=antithetic)
            # keep the iterate inside the ordered interval against rounding
            X = _clip_into(X, fp.Cstar)
    norms = [np.linalg.norm(D) for D in deltas]
    ratios = [norms[i + 1] / norms[i] if norms[i] > 0 else float("nan") for i in range(len(norms) - 1)]
    return DeviationSequence(deltas, offdiag, ratios)


def _clip_into(X, Cstar):
    X = sym(X)
    lo = psd_order_margin(np.zeros_like(X), X)
    hi = psd_order_margin(X, Cstar)
    if lo < -ORDER_TOL or hi < -ORDER_TOL:
        raise OrderingError(f"T-map iterate left 0 <= X <= C* (margins {lo:.3e}, {hi:.3e})")
    return X


# -- two-time covariances ----------------------------------------------------

def _blocks(C, K: int | None = None):
    if isinstance(C, np.ndarray):
        if K is None:
            raise ValueError("K is required for a stacked covariance")
        nb = C.shape[0] // K
        return [[C[t * K:(t + 1) * K, s * K:(s + 1) * K] for s in range(nb)] for t in range(nb)]
    return [[np.asarray(c, float) for c in row] for row in C]


def two_time_cholesky(C, K: int | None = None, pivot_tol: float = 1e-12, strict: bool = True):
    """Lower block-triangular factor ``B[t][s]`` (``s <= t``) of stacked covariance blocks.

    ``B[s][s] = chol(C[s][s] - sum_{s'<s} B[s][s'] B[s][s']^T)`` and
    ``B[t][s] B[s][s]^T = C[t][s] - sum_{s'<s} B[t][s'] B[s][s']^T``.
    With ``strict=False`` a singular Schur complement gets a symmetric PSD root
    and the off-diagonal solve uses a pseudo-inverse (covariances of
    structurally rank-deficient processes).
    """
    blocks = _blocks(C, K)
    nb = len(blocks)
    L = [[None] * nb for _ in range(nb)]
    pinv = [None] * nb
    for s in range(nb):
        S = blocks[s][s] - sum((L[s][j] @ L[s][j].T for j in range(s)), np.zeros_like(blocks[s][s]))
        S = sym(S)
        try:
            L[s][s] = chol_lower(S, pivot_tol=pivot_tol)
            pinv[s] = np.linalg.inv(L[s][s].T)
        except NotPositiveDefiniteError as exc:
            if strict:
                raise NotPositiveDefiniteError(
                    f"stacked covariance not positive definite at block {s} (pivot {exc.pivot})",
                    pivot=s,
                ) from exc
            L[s][s] = psd_sqrt(S, tol=ORDER_TOL)
            pinv[s] = np.linalg.pinv(L[s][s].T, rcond=1e-10)
        for t in range(s + 1, nb):
            R = blocks[t][s] - sum((L[t][j] @ L[s][j].T for j in range(s)), np.zeros_like(blocks[t][s]))
            L[t][s] = R @ pinv[s]
    return L


@dataclass
class SeTrajectory:
    B: list          # B(t), t = 1..T+1
    C: list          # C[t][s], t, s = 1..T+1 (0-based lists)
    Q: list          # Q(t) = E[f'(Gamma(t))], t = 1..T
    C_se: list       # standard errors of C(t+1, t+1)


def se_trajectory(B1, C11, T_steps: int, fp: FixedPoint, mc: McConfig | None = None,
                  pivot_tol: float = 1e-12) -> SeTrajectory:
    """Two-time state evolution from an arbitrary ``(B(1), C(1,1))``.

    Uses the denoiser at ``V*`` of ``fp``. The Gaussian process is sampled as
    ``Psi(t) = sum_s G(s) B(t,s)^T`` from the block factor of the covariances.
    """
    mcs = monte_carlo(mc or fp.mc, fp.C0, fp.problem_obj)
    mcs.reset_warm()
    K, alpha = fp.K, fp.alpha
    nb = T_steps + 1
    Cb = [[np.zeros((K, K)) for _ in range(nb)] for _ in range(nb)]
    Cb[0][0] = sym(np.asarray(C11, float))
    Bs = [np.asarray(B1, float)]
    Qs, Cse = [], []
    fs = []
    for t in range(T_steps):
        L = two_time_cholesky([row[: t + 1] for row in Cb[: t + 1]], pivot_tol=pivot_tol, strict=False)
        psi = sum(mcs.extra(_PSI + s) @ L[t][s].T for s in range(t + 1))
        gamma = mcs.G0 @ Bs[t] + psi
        f, fprime = mcs.denoise(gamma, fp.Vstar, warm=f"se{t}")
        fs.append(f)
        Q = fprime.mean(axis=0)
        Qs.append(Q)
        M = (mcs.G0[:, :, None] * f[:, None, :]).mean(axis=0)
        Bs.append(alpha * M - alpha * Bs[t] @ Q)
        for s in range(t + 1):
            P = alpha * (f[:, :, None] * fs[s][:, None, :])
            Cts = P.mean(axis=0)
            if s == t:
                Cts = sym(Cts)
                Cse.append(P.std(axis=0, ddof=1) / np.sqrt(P.shape[0]))
            Cb[t + 1][s + 1] = Cts
            Cb[s + 1][t + 1] = Cts.T
    return SeTrajectory(Bs, Cb, Qs, Cse)


def expected_kron_sample(fprime: np.ndarray) -> np.ndarray:
    K = fprime.shape[1]
    return np.einsum("nij,nkl->ikjl", fprime, fprime).reshape(K * K, K * K) / fprime.shape[0]


def psd_margin_with_se(samples: np.ndarray) -> tuple[float, float]:
    """Min eigenvalue of the mean of per-sample symmetric matrices and its standard error.

    The error is that of ``u^T D_i u`` along the minimizing eigenvector ``u``.
    """
    M = sym(samples.mean(axis=0))
    w, U = np.linalg.eigh(M)
    u = U[:, 0]
    proj = np.einsum("i,nij,j->n", u, samples, u)
    return float(w[0]), float(proj.std(ddof=1) / np.sqrt(samples.shape[0]))
