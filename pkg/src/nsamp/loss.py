"""Losses, the V-weighted proximal operator and the AMP denoiser.

All functions are vectorized over rows: ``theta``, ``gamma`` and ``y`` are
``(N, K)`` arrays (a single ``(K,)`` row is accepted too). Jacobians follow
the row convention ``f'[k, k'] = d f_k' / d gamma_k`` so that
``f(gamma + delta) ~ f(gamma) + delta @ f'``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NotPositiveDefiniteError, sym

PROX_TOL = 1e-10
PROX_MAX_ITER = 100
ARMIJO_SHRINK = 0.5
ARMIJO_C = 1e-4


class ProxError(RuntimeError):
    """Newton failed to reach the stationarity tolerance."""

    def __init__(self, message: str, residual: float, index: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.index = index


@dataclass(frozen=True)
class LossEval:
    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray


class Loss:
    """Row-wise convex loss ``l(theta; y)`` with analytic derivatives."""

    name = "loss"
    #: Upper bound on the spectral norm of the Hessian over all inputs.
    hess_bound = np.inf

    def value(self, theta, y):
        raise NotImplementedError

    def grad(self, theta, y):
        raise NotImplementedError

    def hess(self, theta, y):
        raise NotImplementedError

    def eval(self, theta, y) -> LossEval:
        return LossEval(self.value(theta, y), self.grad(theta, y), self.hess(theta, y))


def _softmax(theta):
    z = np.exp(theta - theta.max(axis=-1, keepdims=True))
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _logsumexp(theta):
    mx = theta.max(axis=-1, keepdims=True)
    return mx + np.log(np.exp(theta - mx).sum(axis=-1, keepdims=True))


class CrossEntropy(Loss):
    name = "cross_entropy"
    hess_bound = 0.5

    def value(self, theta, y):
        theta = np.asarray(theta, dtype=float)
        return -np.sum(y * (theta - _logsumexp(theta)), axis=-1)

    def grad(self, theta, y):
        return _softmax(np.asarray(theta, dtype=float)) - y

    def hess(self, theta, y):
        p = _softmax(np.asarray(theta, dtype=float))
        return p[..., :, None] * np.eye(p.shape[-1]) - p[..., :, None] * p[..., None, :]


class SquaredLoss(Loss):
    """``l(theta; y) = |theta - y|^2 / 2``; closed forms make it a test fixture."""

    name = "squared"
    hess_bound = 1.0

    def value(self, theta, y):
        return 0.5 * np.sum((theta - y) ** 2, axis=-1)

    def grad(self, theta, y):
        return theta - y

    def hess(self, theta, y):
        K = theta.shape[-1]
        return np.broadcast_to(np.eye(K), theta.shape[:-1] + (K, K)).copy()


CROSS_ENTROPY = CrossEntropy()
SQUARED = SquaredLoss()


def ce_eval(theta, y) -> LossEval:
    """Cross-entropy value, gradient ``softmax(theta) - y`` and Hessian."""
    return CROSS_ENTROPY.eval(np.asarray(theta, float), np.asarray(y, float))


@dataclass
class ProxResult:
    m: np.ndarray
    f: np.ndarray
    fprime: np.ndarray
    newton_iters: int
    residual: float


def _as_rows(a):
    a = np.asarray(a, dtype=float)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


def _check_V(V):
    V = sym(np.asarray(V, dtype=float))
    w = np.linalg.eigvalsh(V)
    if not w[0] > 0:
        raise NotPositiveDefiniteError(f"V is not positive definite (min eigenvalue {w[0]:.3e})", 0)
    return V


def prox_rows(gamma, y, V, loss: Loss = CROSS_ENTROPY, tol: float = PROX_TOL,
              max_iter: int = PROX_MAX_ITER, theta0=None):
    """Minimize ``l(theta; y) + (gamma - theta) V (gamma - theta)^T / 2`` per row.

    Damped Newton on ``l'(theta) + (theta - gamma) V = 0`` with Armijo
    backtracking on the objective. Returns ``(m, iters, max_residual)``.
    """
    V = _check_V(V)
    gamma = np.asarray(gamma, dtype=float)
    y = np.asarray(y, dtype=float)
    theta = gamma.copy() if theta0 is None else np.array(theta0, dtype=float, copy=True)

    def objective(th, g, yy):
        d = th - g
        return loss.value(th, yy) + 0.5 * np.einsum("nk,kl,nl->n", d, V, d)

    active = np.arange(gamma.shape[0])
    it = 0
    res = loss.grad(theta, y) + (theta - gamma) @ V
    rn = np.linalg.norm(res, axis=1)
    active = active[rn > tol]
    while active.size and it < max_iter:
        it += 1
        th, g, yy, r = theta[active], gamma[active], y[active], res[active]
        H = loss.hess(th, yy) + V
        step = np.linalg.solve(H, r[..., None])[..., 0]
        f0 = objective(th, g, yy)
        slope = np.einsum("nk,nk->n", r, step)
        t = np.ones(active.size)
        pending = np.ones(active.size, dtype=bool)
        trial = th - step
        for _ in range(60):
            ok = objective(trial, g, yy) <= f0 - ARMIJO_C * t * slope
            # near the solution rounding hides the decrease; Newton is safe there
            ok |= np.linalg.norm(r, axis=1) < 1e-6
            pending &= ~ok
            if not pending.any():
                break
            t[pending] *= ARMIJO_SHRINK
            trial[pending] = th[pending] - t[pending, None] * step[pending]
        theta[active] = trial
        r_new = loss.grad(trial, yy) + (trial - g) @ V
        res[active] = r_new
        active = active[np.linalg.norm(r_new, axis=1) > tol]
    rmax = float(np.max(np.linalg.norm(res, axis=1), initial=0.0))
    if active.size:
        raise ProxError(
            f"prox Newton did not converge in {max_iter} iterations "
            f"(residual {rmax:.3e} at row {int(active[0])})",
            residual=rmax, index=int(active[0]),
        )
    return theta, it, rmax


def jacobian_from_m(m, y, V, loss: Loss = CROSS_ENTROPY):
    """``f'(gamma) = -l''(m) (V + l''(m))^{-1}`` evaluated at the prox point."""
    V = sym(np.asarray(V, dtype=float))
    Hl = loss.hess(m, y)
    # l'' (V + l'')^{-1} == ((V + l'')^{-1} l'')^T for symmetric factors
    return -np.swapaxes(np.linalg.solve(Hl + V, Hl), -1, -2)


def prox(gamma, y, V, loss: Loss = CROSS_ENTROPY, tol: float = PROX_TOL,
         max_iter: int = PROX_MAX_ITER) -> ProxResult:
    g, single = _as_rows(gamma)
    yy, _ = _as_rows(y)
    m, iters, rmax = prox_rows(g, yy, V, loss, tol, max_iter)
    fp = jacobian_from_m(m, yy, V, loss)
    f = m - g
    if single:
        return ProxResult(m[0], f[0], fp[0], iters, rmax)
    return ProxResult(m, f, fp, iters, rmax)


def denoiser(gamma, y, V, loss: Loss = CROSS_ENTROPY, tol: float = PROX_TOL):
    """AMP non-linearity ``f(gamma; y) = m(gamma; y) - gamma``."""
    return prox(gamma, y, V, loss, tol).f


def denoiser_jac(gamma, y, V, loss: Loss = CROSS_ENTROPY, tol: float = PROX_TOL):
    return prox(gamma, y, V, loss, tol).fprime
