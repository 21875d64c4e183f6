"""Direct AMP iteration on an explicit design matrix, with trajectory records."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .loss import CROSS_ENTROPY, Loss, prox_rows
from .model import Dataset, GroundTruth
from .numerics import SeededRng, inner, psd_sqrt
from .state_evolution import ORDER_TOL, FixedPoint

#: Newton tolerance for the row-wise prox inside AMP. Must sit well below
#: the late step distances so that geometric decay is not floored.
AMP_PROX_TOL = 1e-13


@dataclass
class AmpState:
    t: int
    omega: np.ndarray
    f_prev: np.ndarray
    gamma: np.ndarray | None
    Q: np.ndarray
    m_prev: np.ndarray | None = field(default=None, repr=False)


def amp_init(gt: GroundTruth, fp: FixedPoint, rng: SeededRng, n: int | None = None) -> AmpState:
    """``omega(1) = r0 B* + u sqrt(C*)`` with a fresh Gaussian ``u``."""
    u = rng.normal((gt.d, gt.K))
    omega = gt.r0 @ fp.Bstar + u @ psd_sqrt(fp.Cstar, tol=ORDER_TOL)
    n = n if n is not None else 0
    return AmpState(1, omega, np.zeros((n, gt.K)), None, fp.onsager)


Denoiser = Callable[[np.ndarray, np.ndarray, np.ndarray | None], tuple]


def _prox_denoiser(V, loss: Loss, tol: float):
    def den(gamma, y, m0):
        m, _, _ = prox_rows(gamma, y, V, loss, tol=tol, theta0=m0)
        return m - gamma, m

    return den


def amp_step(state: AmpState, X, y, fp: FixedPoint, denoiser: Denoiser | None = None,
             Q: np.ndarray | None = None, loss: Loss = CROSS_ENTROPY,
             prox_tol: float = AMP_PROX_TOL) -> tuple[AmpState, np.ndarray]:
    """One AMP iteration; returns the next state and ``f(t)``.

    ``gamma = X omega - f_prev``, ``f = f(gamma; y)``,
    ``omega_next = X^T f - alpha omega Q``.
    """
    den = denoiser or _prox_denoiser(fp.Vstar, loss, prox_tol)
    Q = state.Q if Q is None else Q
    f_prev = state.f_prev if state.f_prev.shape[0] == X.shape[0] else np.zeros((X.shape[0], fp.K))
    gamma = X @ state.omega - f_prev
    f, m = den(gamma, y, state.m_prev)
    omega = X.T @ f - fp.alpha * state.omega @ Q
    return AmpState(state.t + 1, omega, f, gamma, state.Q, m), f


def gradient_matrix(omega, X, y, lambda0: float, loss: Loss = CROSS_ENTROPY) -> np.ndarray:
    return lambda0 * omega + X.T @ loss.grad(X @ omega, y)


def gradient_norm(omega, X, y, lambda0: float, loss: Loss = CROSS_ENTROPY) -> float:
    """``||lambda0 omega + X^T l'(X omega; y)||_F / sqrt(d)``."""
    return float(np.linalg.norm(gradient_matrix(omega, X, y, lambda0, loss)) / np.sqrt(omega.shape[0]))


def _ffmt(x) -> str:
    return format(float(x), ".17g")


@dataclass
class AmpTrajectory:
    """Per-iteration records for ``t = 1..T``.

    ``omega_step[t-1] = ||omega(t+1) - omega(t)||_F / sqrt(d)`` and similarly
    for ``gamma_step`` with ``sqrt(n)``; ``ratio[t-1]`` is the squared step
    quotient ``omega_step(t)^2 / omega_step(t-1)^2`` (NaN at t = 1).
    ``B[t-1] = <r0, omega(t)>`` and ``C[t-1] = <psi(t), psi(t)>``.
    """

    K: int
    omega_step: list = field(default_factory=list)
    gamma_step: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    B: list = field(default_factory=list)
    C: list = field(default_factory=list)
    f_overlap: list = field(default_factory=list)   # <g0, f(t)>
    f_gram: list = field(default_factory=list)      # <f(t), f(t)>
    gamma_gram: list = field(default_factory=list)  # <gamma(t), gamma(t)>
    omegas: list | None = None
    summary: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.omega_step)

    @property
    def ratio(self) -> list:
        s = np.asarray(self.omega_step)
        out = [float("nan")]
        for t in range(1, len(s)):
            out.append(float(s[t] ** 2 / s[t - 1] ** 2) if s[t - 1] > 0 else float("nan"))
        return out

    def mean_ratio(self, t_lo: int = 10, t_hi: int = 15) -> float:
        r = self.ratio
        return float(np.mean([r[t - 1] for t in range(t_lo, min(t_hi, self.T) + 1)]))

    def statistics(self) -> dict[str, np.ndarray]:
        """Scalar trajectory statistics keyed by name, each of length T."""
        K = self.K
        out = {
            "omega_step_dist": np.asarray(self.omega_step),
            "gamma_step_dist": np.asarray(self.gamma_step),
        }
        B = np.asarray(self.B)
        C = np.asarray(self.C)
        for i in range(K):
            for j in range(K):
                out[f"B_{i + 1}{j + 1}"] = B[:, i, j]
                out[f"C_{i + 1}{j + 1}"] = C[:, i, j]
        return out

    def header(self) -> list[str]:
        K = self.K
        cols = ["t", "omega_step_dist", "gamma_step_dist", "ratio", "grad_norm"]
        cols += [f"B_{i + 1}{j + 1}" for i in range(K) for j in range(K)]
        cols += [f"C_{i + 1}{j + 1}" for i in range(K) for j in range(K)]
        return cols

    def rows(self):
        ratio = self.ratio
        for t in range(self.T):
            gn = self.grad_norm[t] if self.grad_norm else float("nan")
            yield ([t + 1, _ffmt(self.omega_step[t]), _ffmt(self.gamma_step[t]), _ffmt(ratio[t]), _ffmt(gn)]
                   + [_ffmt(x) for x in np.ravel(self.B[t])] + [_ffmt(x) for x in np.ravel(self.C[t])])

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for row in self.rows():
            w.writerow(row)
        return buf.getvalue()


def record_iterate(traj: AmpTrajectory, omega, r0) -> None:
    B = inner(r0, omega)
    psi = omega - r0 @ B
    traj.B.append(B)
    traj.C.append(inner(psi, psi))


def amp_run(gt: GroundTruth, data: Dataset, fp: FixedPoint, T_steps: int, rng: SeededRng,
            Q_schedule: Sequence[np.ndarray] | None = None, keep_iterates: bool = False,
            track_grad: bool = True, loss: Loss = CROSS_ENTROPY,
            prox_tol: float = AMP_PROX_TOL) -> AmpTrajectory:
    """Run AMP from the fixed-point initialization and record ``T_steps`` rows.

    ``Q_schedule`` replaces the frozen Onsager matrix by a per-iteration
    sequence (e.g. from :func:`se_trajectory` for other initializations).
    """
    X, y = data.X, data.y
    if X.shape[1] != gt.d or y.shape != (X.shape[0], gt.K):
        raise ValueError("dataset does not match the ground truth dimensions")
    d, n = gt.d, X.shape[0]
    state = amp_init(gt, fp, rng, n)
    g0 = X @ gt.r0
    traj = AmpTrajectory(gt.K, omegas=[] if keep_iterates else None)
    omegas = [state.omega]
    gammas = []
    for t in range(1, T_steps + 2):
        Q = None if Q_schedule is None else Q_schedule[min(t - 1, len(Q_schedule) - 1)]
        state, f = amp_step(state, X, y, fp, Q=Q, loss=loss, prox_tol=prox_tol)
        gammas.append(state.gamma)
        if t <= T_steps:
            traj.f_overlap.append(inner(g0, f))
            traj.f_gram.append(inner(f, f))
            traj.gamma_gram.append(inner(state.gamma, state.gamma))
        omegas.append(state.omega)
        # keep only what the next records need
        if len(gammas) > 2:
            gammas.pop(0)
        if len(gammas) == 2:
            traj.gamma_step.append(float(np.linalg.norm(gammas[1] - gammas[0]) / np.sqrt(n)))
        w_prev, w_cur = omegas[-2], omegas[-1]
        if t <= T_steps:
            traj.omega_step.append(float(np.linalg.norm(w_cur - w_prev) / np.sqrt(d)))
            record_iterate(traj, w_prev, gt.r0)
            if track_grad:
                traj.grad_norm.append(gradient_norm(w_prev, X, y, fp.lambda0, loss))
            if keep_iterates:
                traj.omegas.append(w_prev)
        omegas = omegas[-1:]
    traj.summary = {"engine": "direct", "d": d, "n": n, "K": gt.K, "T": T_steps}
    return traj
