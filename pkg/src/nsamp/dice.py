"""Matrix-free simulation of the AMP dynamics (Householder dice).

The rectangular iteration is embedded in a symmetric one of size
``m = n + d`` driven by the GOE-like matrix

    A = [[sqrt(alpha) Z_n, X], [X^T, Z_d]] / sqrt(1 + alpha),

whose off-diagonal entries have variance ``1/m``. With
``m(2t-1) = sqrt(1+alpha) [0; omega(t)]`` and ``m(2t) = sqrt(1+alpha) [f(t); 0]``
the symmetric recursion ``h(s) = A m(s) - m(s-1) Qm(s)`` unpacks to
``h_n(2t-1) = gamma(t)`` and ``h_d(2t) = omega(t+1)`` when
``Qm(2t-1) = I / sqrt(1+alpha)`` and ``Qm(2t) = alpha Q / sqrt(1+alpha)``.

``A m(s)`` is generated without ``A``: each new direction of the iterates
reveals one column block of ``A`` through fresh Gaussians. Every basis block
lives on one half of the embedding, so it is stored in half-length form and
only its fresh Gaussians on the opposite half ever enter an output. The
``Z`` blocks are drawn (they belong to the representation) but their term
vanishes on the half that is read out.

All inner products here are normalized by ``m``.
"""
from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .amp import AmpTrajectory, Denoiser, amp_init, record_iterate
from .loss import CROSS_ENTROPY, Loss, prox_rows
from .model import SOFTMAX_PROBLEM, GroundTruth, Problem, n_samples
from .numerics import SeededRng, gs_block_reduced, inner
from .state_evolution import FixedPoint

N_SIDE, D_SIDE = 0, 1
DICE_PROX_TOL = 1e-13
# child streams under the run rng
_S_INIT, _S_U, _S_Z, _S_LABELS = 0, 1, 2, 3


@dataclass
class Block:
    """One basis block ``v(s)`` with its fresh Gaussian ``u_hat(s)``.

    ``v`` holds the rows of the side it lives on; ``u_hat`` the rows of the
    opposite side, projected off that side's basis ``v(0:s)``.
    """

    s: int
    side: int
    v: np.ndarray
    u_hat: np.ndarray
    Z: np.ndarray


@dataclass
class DiceState:
    s: int
    m_dim: int
    n: int
    d: int
    K: int
    blocks: list = field(default_factory=list)
    m_vec: np.ndarray | None = None       # half-length current iterate m(s)
    m_side: int = D_SIDE
    m_prev: np.ndarray | None = None      # half-length m(s-1)
    h_vec: np.ndarray | None = None
    g0: np.ndarray | None = None
    y: np.ndarray | None = None
    prox_warm: np.ndarray | None = None
    overlaps_v: dict = field(default_factory=dict)
    overlaps_u: dict = field(default_factory=dict)

    def side_len(self, side: int) -> int:
        return self.n if side == N_SIDE else self.d

    def ip(self, a, b) -> np.ndarray:
        """``a^T b / m`` for half-length arrays on the same side."""
        return a.T @ b / self.m_dim


def _gs(state: DiceState, b: np.ndarray, side: int, rel_tol: float) -> np.ndarray:
    basis = [blk.v for blk in state.blocks if blk.side == side]
    h = b.shape[0]
    scale = np.sqrt(state.m_dim / h)
    # gs_block_reduced normalizes by the half length; rescale to m
    v = gs_block_reduced(b, [w / scale for w in basis], rel_tol=rel_tol)
    return v * scale


def _project_off(state: DiceState, u: np.ndarray, side: int) -> np.ndarray:
    basis = [blk.v for blk in state.blocks if blk.side == side]
    r = u.copy()
    for _ in range(2):
        for v in basis:
            r -= v @ state.ip(v, r)
    return r


def _sym_gaussian(k: int, rng: SeededRng) -> np.ndarray:
    """``k x k`` symmetric Gaussian: off-diagonal N(0, 1), diagonal N(0, 2)."""
    G = rng.normal((k, k))
    return (G + G.T) / np.sqrt(2.0)


def _add_block(state: DiceState, v: np.ndarray, side: int, rng: SeededRng, reduced: bool) -> None:
    k = v.shape[1]
    other = 1 - side
    u = rng.child(_S_U, state.s).normal((state.side_len(other), k))
    Z = _sym_gaussian(k, rng.child(_S_Z, state.s))
    # the new block itself is on `side`, so projecting `u` only involves the other side
    u_hat = u if reduced else _project_off(state, u, other)
    state.blocks.append(Block(state.s, side, v, u_hat, Z))


def dice_init(gt: GroundTruth, fp: FixedPoint, rng: SeededRng, alpha: float | None = None,
              problem: Problem = SOFTMAX_PROBLEM) -> DiceState:
    """Seed ``v(0) = sqrt(1+alpha) [0; r0]``, its fresh block and ``m(1)``.

    The ``n`` half of ``u_hat(0)`` plays the role of ``g0 = X r0``; the
    labels are generated from it through the channel, ``y ~ p0(. | g0 B0)``.
    """
    alpha = fp.alpha if alpha is None else alpha
    d, K = gt.d, gt.K
    n = n_samples(alpha, d)
    m_dim = n + d
    state = DiceState(0, m_dim, n, d, K)
    v0 = gt.r0 * np.sqrt(m_dim / d)
    _add_block(state, v0, D_SIDE, rng, reduced=False)
    state.g0 = state.blocks[0].u_hat
    state.y = problem.channel.sample(state.g0 @ gt.B0, rng.child(_S_LABELS))
    omega1 = amp_init(gt, fp, rng.child(_S_INIT)).omega
    state.s = 1
    state.m_vec = np.sqrt(1 + alpha) * omega1
    state.m_side = D_SIDE
    state.m_prev = np.zeros((n, K))
    return state


def dice_step(state: DiceState, fp: FixedPoint, rng: SeededRng, loss: Loss = CROSS_ENTROPY,
              rel_tol: float = 1e-24, reduced: bool = False, prox_tol: float = DICE_PROX_TOL,
              denoiser: Denoiser | None = None):
    """One symmetric step: extend the basis with ``m(s)``, form ``h(s)``, apply ``eta_s``.

    ``denoiser(gamma, y, warm) -> (f, warm)`` replaces the prox denoiser when given.

    Returns the unpacked quantity: ``gamma(t)`` at odd ``s = 2t-1`` and
    ``omega(t+1)`` at even ``s = 2t``.
    """
    s, side = state.s, state.m_side
    out_side = 1 - side
    a1 = np.sqrt(1 + fp.alpha)
    v = _gs(state, state.m_vec, side, rel_tol)
    _add_block(state, v, side, rng, reduced)
    ov_v, ov_u = {}, {}
    h = np.zeros((state.side_len(out_side), state.K))
    for blk in state.blocks:
        if blk.side == side:
            # the fresh Gaussian of this direction, weighted by <v, m>
            c = state.ip(blk.v, state.m_vec)
            ov_v[blk.s] = c
            h += blk.u_hat @ c
            # blk.v Z c / sqrt(m) sits on `side`, not on the read-out half
        elif blk.s < s:
            # reflected part of earlier directions living on the read-out half
            c = state.ip(blk.u_hat, state.m_vec)
            ov_u[blk.s] = c
            h += blk.v @ c
    if s > 1:
        Qm = fp.alpha * fp.onsager / a1 if s % 2 == 0 else np.eye(state.K) / a1
        h -= state.m_prev @ Qm
    state.overlaps_v, state.overlaps_u = ov_v, ov_u
    state.h_vec = h
    state.m_prev = state.m_vec
    if out_side == N_SIDE:
        if denoiser is None:
            m, _, _ = prox_rows(h, state.y, fp.Vstar, loss, tol=prox_tol, theta0=state.prox_warm)
            f = m - h
        else:
            f, m = denoiser(h, state.y, state.prox_warm)
        state.prox_warm = m
        state.m_vec = a1 * f
    else:
        state.m_vec = a1 * h
    state.m_side = out_side
    state.s = s + 1
    return h


def basis_gram_error(state: DiceState) -> float:
    """Max entry of ``<v(i), v(j)> - delta_ij I`` over all stored blocks."""
    err = 0.0
    for side in (N_SIDE, D_SIDE):
        vs = [b.v for b in state.blocks if b.side == side]
        if not vs:
            continue
        V = np.concatenate(vs, axis=1)
        G = state.ip(V, V)
        err = max(err, float(np.max(np.abs(G - np.eye(G.shape[0])))))
    return err


def dice_run(gt: GroundTruth, fp: FixedPoint, T_steps: int, rng: SeededRng,
             loss: Loss = CROSS_ENTROPY, problem: Problem = SOFTMAX_PROBLEM,
             reduced: bool = False, measure_memory: bool = True,
             keep_iterates: bool = False) -> AmpTrajectory:
    """Run ``T_steps`` AMP iterations through the dice and record the usual trajectory."""
    t0 = time.perf_counter()
    started = False
    if measure_memory and not tracemalloc.is_tracing():
        tracemalloc.start()
        started = True
    if measure_memory:
        tracemalloc.reset_peak()
    try:
        state = dice_init(gt, fp, rng, problem=problem)
        d, n = state.d, state.n
        a1 = np.sqrt(1 + fp.alpha)
        traj = AmpTrajectory(gt.K, omegas=[] if keep_iterates else None)
        omega = state.m_vec / a1
        gamma_prev = None
        for t in range(1, T_steps + 2):
            gamma = dice_step(state, fp, rng, loss, reduced=reduced)
            f = state.m_vec / a1
            omega_next = dice_step(state, fp, rng, loss, reduced=reduced)
            if gamma_prev is not None:
                traj.gamma_step.append(float(np.linalg.norm(gamma - gamma_prev) / np.sqrt(n)))
            if t <= T_steps:
                traj.f_overlap.append(inner(state.g0, f))
                traj.f_gram.append(inner(f, f))
                traj.gamma_gram.append(inner(gamma, gamma))
                traj.omega_step.append(float(np.linalg.norm(omega_next - omega) / np.sqrt(d)))
                record_iterate(traj, omega, gt.r0)
                traj.grad_norm.append(float("nan"))
                if keep_iterates:
                    traj.omegas.append(omega)
            gamma_prev, omega = gamma, omega_next
        peak = tracemalloc.get_traced_memory()[1] if measure_memory else None
        traj.summary = {
            "engine": "dice", "d": d, "n": n, "K": gt.K, "T": T_steps,
            "basis_blocks": len(state.blocks),
            "basis_widths": [int(b.v.shape[1]) for b in state.blocks],
            "basis_gram_error": basis_gram_error(state),
            "peak_bytes": peak, "reduced": reduced,
            "seconds": time.perf_counter() - t0,
        }
        return traj
    finally:
        if started:
            tracemalloc.stop()
