"""Reference solver for the ridge-regularized empirical risk and AMP cross-checks.

Objective: ``sum_i l(x_i omega; y_i) + lambda0 ||omega||_F^2 / 2`` over ``omega`` of
shape ``d x K``. The solver is independent of AMP so that agreement between
the two is a genuine check.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg, svds

from .amp import AmpTrajectory, gradient_matrix
from .loss import CROSS_ENTROPY, Loss
from .model import GroundTruth
from .numerics import SeededRng
from .state_evolution import FixedPoint

log = logging.getLogger(__name__)

DENSE_NEWTON_MAX_DK = 3000


class SolverError(RuntimeError):
    def __init__(self, message: str, report: "SolveReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass
class SolveReport:
    omega_star: np.ndarray
    grad_norm: float
    iterations: int
    objective: float
    method: str = "newton"
    objective_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d, K = self.omega_star.shape
        return {"d": d, "K": K, "grad_norm": self.grad_norm, "iterations": self.iterations,
                "objective": self.objective, "method": self.method,
                "objective_history": self.objective_history}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def objective(omega, X, y, lambda0: float, loss: Loss = CROSS_ENTROPY) -> float:
    return float(np.sum(loss.value(X @ omega, y)) + 0.5 * lambda0 * np.sum(omega * omega))


def _hess_apply(X, H_rows, lambda0, W):
    """``lambda0 W + X^T [l''_i (X W)_i]_i``."""
    Z = X @ W
    return lambda0 * W + X.T @ np.einsum("nkl,nl->nk", H_rows, Z)


def _dense_hessian(X, H_rows, lambda0):
    d = X.shape[1]
    K = H_rows.shape[1]
    H = np.zeros((d, K, d, K))
    for k in range(K):
        for l in range(K):
            H[:, k, :, l] = X.T @ (X * H_rows[:, k, l][:, None])
    H = H.reshape(d * K, d * K)
    H[np.diag_indices_from(H)] += lambda0
    return H


def solve_ridge_softmax(X, y, lambda0: float, tol: float = 1e-8, max_iter: int | None = None,
                        loss: Loss = CROSS_ENTROPY, method: str = "auto",
                        omega0: np.ndarray | None = None) -> SolveReport:
    """Minimize the ridge objective to ``||G||_F / sqrt(d) <= tol``.

    ``method``: ``"newton"`` (dense dK system), ``"newton-cg"`` (matrix-free
    Hessian products), ``"gd"`` (fixed step ``1 / (lambda0 + L ||X||_2^2)``), or
    ``"auto"``: dense Newton when ``dK <= 3000``, else Newton-CG.
    Newton iterations use Armijo backtracking, so the objective is monotone.
    """
    if not lambda0 > 0:
        raise ValueError("lambda0 must be positive")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    K = y.shape[1]
    if method == "auto":
        method = "newton" if d * K <= DENSE_NEWTON_MAX_DK else "newton-cg"
    if max_iter is None:
        max_iter = 100_000 if method == "gd" else 100
    omega = np.zeros((d, K)) if omega0 is None else np.array(omega0, dtype=float)
    sd = np.sqrt(d)
    obj = objective(omega, X, y, lambda0, loss)
    hist = [obj]
    G = gradient_matrix(omega, X, y, lambda0, loss)
    gn = float(np.linalg.norm(G) / sd)
    it = 0
    # 1 / Lipschitz constant of the gradient; ||X||_2^2 exceeds n/d by ~ 2 sqrt(n/d)
    step_gd = 1.0 / (lambda0 + loss.hess_bound * spectral_norm(X) ** 2) if method == "gd" else None
    while gn > tol and it < max_iter:
        it += 1
        if method == "gd":
            omega = omega - step_gd * G
        else:
            H_rows = loss.hess(X @ omega, y)
            if method == "newton":
                step = np.linalg.solve(_dense_hessian(X, H_rows, lambda0), G.ravel()).reshape(d, K)
            else:
                op = LinearOperator((d * K, d * K), dtype=float,
                                    matvec=lambda v: _hess_apply(X, H_rows, lambda0, v.reshape(d, K)).ravel())
                # forcing term shrinks with the gradient: superlinear local rate
                rtol = min(0.1, np.sqrt(gn))
                sol, _ = cg(op, G.ravel(), rtol=rtol * 1e-2, atol=0.0, maxiter=500)
                step = sol.reshape(d, K)
            slope = float(np.sum(G * step))
            t = 1.0
            for _ in range(50):
                trial = omega - t * step
                o = objective(trial, X, y, lambda0, loss)
                if o <= obj - 1e-4 * t * slope or gn < 1e-6:
                    break
                t *= 0.5
            omega = trial
        obj_new = objective(omega, X, y, lambda0, loss)
        hist.append(obj_new)
        obj = obj_new
        G = gradient_matrix(omega, X, y, lambda0, loss)
        gn = float(np.linalg.norm(G) / sd)
    report = SolveReport(omega, gn, it, obj, method, hist)
    if gn > tol:
        raise SolverError(f"{method} stopped after {it} iterations at grad norm {gn:.3e}", report)
    return report


def strong_convexity_probe(report: SolveReport, X, y, lambda0: float, rng: SeededRng,
                           n_probe: int = 5, scale: float = 0.1, loss: Loss = CROSS_ENTROPY) -> list[float]:
    """Slack of ``obj(w* + delta) - obj(w*) - lambda0 ||delta||^2 / 2`` for random ``delta``."""
    w = report.omega_star
    out = []
    for i in range(n_probe):
        delta = scale * rng.child(i).normal(w.shape)
        out.append(objective(w + delta, X, y, lambda0, loss) - report.objective
                   - 0.5 * lambda0 * float(np.sum(delta * delta)))
    return out


def spectral_norm(X) -> float:
    """Largest singular value of ``X``."""
    X = np.asarray(X, dtype=float)
    if min(X.shape) <= 2:
        return float(np.linalg.norm(X, 2))
    return float(svds(X, k=1, return_singular_vectors=False, random_state=0)[0])


def theorem3_check(omega_star, trajectory: AmpTrajectory, gt: GroundTruth, fp: FixedPoint,
                   X=None, x_norm: float | None = None, oracle_grad_norm: float = 0.0,
                   hess_bound: float = CROSS_ENTROPY.hess_bound) -> dict:
    """Distance of AMP iterates to the minimizer against the step-distance bound.

    For ``t >= 2``:
    ``||omega(t) - w*||_F <= (2/lambda0) ||lambda0 I - V*||_2 ||omega(t) - omega(t-1)||_F
    + (L/lambda0) ||X||_2 ||gamma(t) - gamma(t-1)||_F``.
    ``w*`` is known only to solver accuracy, so ``slack = (2/lambda0) ||G(w*)||_F``
    is added to the bound (the same strong-convexity argument).
    Distances and bounds are reported divided by ``sqrt(d)``.
    """
    if trajectory.omegas is None:
        raise ValueError("trajectory must keep iterates (keep_iterates=True)")
    d = gt.d
    n = trajectory.summary.get("n")
    if x_norm is None:
        if X is None:
            raise ValueError("need X or x_norm")
        x_norm = spectral_norm(X)
    lam = fp.lambda0
    c1 = (2 / lam) * float(np.linalg.norm(lam * np.eye(fp.K) - fp.Vstar, 2))
    c2 = hess_bound / lam * x_norm
    slack = (2 / lam) * oracle_grad_norm  # already per sqrt(d)
    dist, bound = [], []
    for t, w in enumerate(trajectory.omegas, start=1):
        dist.append(float(np.linalg.norm(w - omega_star) / np.sqrt(d)))
        if t >= 2:
            dw = trajectory.omega_step[t - 2]                     # per sqrt(d)
            dg = trajectory.gamma_step[t - 2] * np.sqrt(n / d)    # per sqrt(d)
            bound.append(c1 * dw + c2 * dg + slack)
        else:
            bound.append(float("inf"))
    holds = [a <= b for a, b in zip(dist, bound)]
    return {"dist": dist, "bound": bound, "holds": holds, "all_hold": all(holds),
            "x_norm": x_norm, "c_omega": c1, "c_gamma": c2, "oracle_slack": slack,
            "final_dist": dist[-1]}


def corollary_error_check(omega_star, gt: GroundTruth, fp: FixedPoint) -> dict:
    """``||w* - omega0||_F^2 / d`` against ``tr((B0 - B*)^T (B0 - B*) + C*)``."""
    lhs = float(np.sum((omega_star - gt.omega0) ** 2) / gt.d)
    D = gt.B0 - fp.Bstar
    rhs = float(np.trace(D.T @ D + fp.Cstar))
    gap = lhs - rhs
    return {"lhs": lhs, "rhs": rhs, "abs_gap": abs(gap),
            "rel_gap": abs(gap) / rhs if rhs > 0 else float("inf" if gap else 0.0)}
