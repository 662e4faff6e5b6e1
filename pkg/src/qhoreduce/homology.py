"""Homological equation of one reduction step.

Given a block-diagonal Hermitian ``N`` and a quasi-periodic ``Q`` the
step solves

    -omega . grad S + i [N, S] = N_tilde - Q + R

with ``N_tilde`` the block-diagonal average of ``Q``, ``R`` the Fourier
tail beyond ``K`` and ``S`` supported on ``|k|_1 <= K``.  Fourier
coefficient ``k`` and cluster pair ``(a, b)`` give the Sylvester problem

    (k.omega - N_a) S_ab + S_ab N_b = -i Q_ab(k),

solved by division in the eigenbases of ``N_a`` and ``N_b``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .blockmat import BlockMatrix, block_diagonal_part, block_norms, decay_norm, log_weights
from .exceptions import DivisorTooSmall, NotHermitianError, ScheduleError
from .potential import QuasiPeriodicMatrix, coefficient_norm, strip_norm

logger = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-10


def diagonalize_block(N_block, tol=1e-12):
    """Eigen-decomposition ``N = P D P^H`` with a deterministic gauge.

    Eigenvalues ascend.  Inside a group of (numerically) equal
    eigenvalues the basis is rebuilt by Gram-Schmidt on the projected unit
    vectors, then every column is rotated so that its largest component is
    real and positive.
    """
    N_block = np.asarray(N_block, dtype=complex)
    scale = max(1.0, float(np.max(np.abs(N_block), initial=0.0)))
    if np.max(np.abs(N_block - N_block.conj().T), initial=0.0) > tol * scale:
        raise NotHermitianError("block is not Hermitian")
    D, P = np.linalg.eigh(0.5 * (N_block + N_block.conj().T))
    n = len(D)
    start = 0
    while start < n:
        stop = start + 1
        while stop < n and D[stop] - D[start] <= DEGENERACY_TOL * scale:
            stop += 1
        if stop - start > 1:
            P[:, start:stop] = _canonical_group_basis(P[:, start:stop])
        start = stop
    for j in range(n):
        col = P[:, j]
        i = int(np.argmax(np.abs(col) - 1e-12 * np.arange(n)))
        P[:, j] = col * (abs(col[i]) / col[i])
    return P, D


def _canonical_group_basis(V):
    proj = V @ V.conj().T
    basis = []
    for i in range(V.shape[0]):
        v = proj[:, i].copy()
        for u in basis:
            v -= (u.conj() @ v) * u
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            basis.append(v / nv)
        if len(basis) == V.shape[1]:
            break
    return np.stack(basis, axis=1)


@dataclass
class DivisorContext:
    """Frequency, gaps and block eigen-data used to divide small divisors."""

    omega: np.ndarray
    K: int
    gamma: float
    kappa: float
    delta: float
    C0: float
    blocks: list
    basis: object = None
    eps0: float = 0.0
    beta: float = 1.0

    @classmethod
    def from_normal_form(cls, N, omega, K, gamma, kappa, beta, eps0=0.0, C0=None):
        blocks = [diagonalize_block(N.data[s, s]) for s in N.basis.slices]
        return cls(
            omega=np.atleast_1d(np.asarray(omega, dtype=float)),
            K=int(K),
            gamma=float(gamma),
            kappa=float(kappa),
            delta=2.0 * beta,
            C0=2.0 * eps0 if C0 is None else float(C0),
            blocks=blocks,
            basis=N.basis,
            eps0=float(eps0),
            beta=float(beta),
        )

    @property
    def mu(self):
        return [D for _, D in self.blocks]

    @property
    def eigenvalues(self):
        return np.concatenate(self.mu)

    def unitary(self):
        """Block-diagonal unitary collecting the per-cluster diagonalisers."""
        P = np.zeros((self.basis.size, self.basis.size), dtype=complex)
        for s, (Pa, _) in zip(self.basis.slices, self.blocks):
            P[s, s] = Pa
        return P

    def with_omega(self, omega):
        return replace(self, omega=np.atleast_1d(np.asarray(omega, dtype=float)))

    def loss_factor(self):
        """``exp(C_{delta,d} gamma^(-1/delta))``; exactly 1 when ``d = 1``."""
        d = self.basis.d
        if d == 1:
            return 1.0
        c = 0.5 * (d - 1) * (2.0 * self.C0) ** (1.0 / self.delta)
        return math.exp(c * self.gamma ** (-1.0 / self.delta))

    def critical_condition(self):
        """``exp{8d (eps0/gamma)^(1/(2 beta))} kappa <= gamma``."""
        d = self.basis.d
        lhs = math.exp(8 * d * (self.eps0 / self.gamma) ** (1.0 / (2 * self.beta))) * self.kappa
        return lhs <= self.gamma


def divisor_bound(ctx, a, b, norm_A):
    wa = ctx.basis.cluster_weights[a]
    wb = ctx.basis.cluster_weights[b]
    return ctx.loss_factor() * norm_A / (ctx.kappa * (1.0 + abs(wa - wb)))


def solve_small_divisor(A_block, ctx, a, b, k, cross_check=True):
    """Solve ``(k.omega) B - N_a B + B N_b = A`` for one cluster pair.

    ``a`` and ``b`` are cluster positions.  The solution is computed by
    entrywise division in the eigenbases; with ``cross_check`` it is
    compared against a direct Sylvester solve.
    """
    k = np.atleast_1d(np.asarray(k, dtype=int))
    kw = float(k @ ctx.omega)
    Pa, Da = ctx.blocks[a]
    Pb, Db = ctx.blocks[b]
    wa = ctx.basis.cluster_weights[a]
    wb = ctx.basis.cluster_weights[b]
    A_block = np.asarray(A_block, dtype=complex)
    div = kw - Da[:, None] + Db[None, :]
    threshold = ctx.kappa * (1.0 + abs(wa - wb))
    worst = float(np.min(np.abs(div)))
    if worst < threshold:
        raise DivisorTooSmall(k, a, b, worst, threshold)
    B = Pa @ ((Pa.conj().T @ A_block @ Pb) / div) @ Pb.conj().T
    if cross_check:
        Na = (Pa * Da) @ Pa.conj().T
        Nb = (Pb * Db) @ Pb.conj().T
        B_syl = scipy.linalg.solve_sylvester(kw * np.eye(len(Da)) - Na, Nb, A_block)
        gap = float(np.max(np.abs(B_syl - B), initial=0.0))
        # the Sylvester solve loses accuracy in proportion to the divisor spread
        cond = max(1.0, (abs(kw) + np.max(np.abs(Da)) + np.max(np.abs(Db))) / worst)
        if gap > 1e-12 * cond * max(1.0, float(np.max(np.abs(B), initial=0.0))):
            raise ArithmeticError(f"Sylvester and eigenbasis solutions differ by {gap:.2e}")
    return B


@dataclass
class HomologySolution:
    S: QuasiPeriodicMatrix
    N_tilde: BlockMatrix
    R: QuasiPeriodicMatrix
    K: int
    worst_divisor: tuple = None
    bound_ratio: float = 0.0
    estimates: dict = field(default_factory=dict)


def _divisor_tensor(ctx, ks):
    basis = ctx.basis
    alpha = ctx.eigenvalues
    kw = ks.astype(float) @ ctx.omega
    div = kw[:, None, None] - alpha[None, :, None] + alpha[None, None, :]
    w = basis.weights
    thresh = 1.0 + np.abs(w[:, None] - w[None, :])
    same = basis.mode_cluster[:, None] == basis.mode_cluster[None, :]
    zero = np.all(ks == 0, axis=1)
    excluded = zero[:, None, None] & same[None, :, :]
    return div, thresh, excluded


def homological_step(N, Q, ctx, sigma_prime=None, cross_check=False, enforce_smallness=False):
    """Solve one homological equation; see the module docstring.

    Raises :class:`DivisorTooSmall` at the worst retained divisor below
    ``kappa (1 + |w_a - w_b|)``.
    """
    basis = N.basis
    if not N.is_hermitian(1e-10):
        raise NotHermitianError("N must be Hermitian")
    if enforce_smallness and not ctx.critical_condition():
        raise ScheduleError("smallness condition fails for this (eps0, gamma, kappa)")
    if ctx.eps0 > 0:
        drift = decay_norm(N - BlockMatrix.diagonal(basis), ctx.beta).norm
        if drift > 2 * ctx.eps0 * (1 + 1e-9):
            logger.warning("[N - N0]_beta = %.3e exceeds 2 eps0 = %.3e", drift, 2 * ctx.eps0)

    low, tail = Q.split(ctx.K)
    active = Q.l1_orders() <= ctx.K
    ks = Q.ks[active]
    coeffs = Q.coeffs[active]

    P = ctx.unitary()
    Qp = P.conj().T[None] @ coeffs @ P[None]
    div, thresh, excluded = _divisor_tensor(ctx, ks)
    ratio = np.where(excluded, np.inf, np.abs(div) / thresh)
    worst = None
    if ratio.size and np.isfinite(np.min(ratio)):
        i, j, l = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
        a, b = int(basis.mode_cluster[j]), int(basis.mode_cluster[l])
        worst = (tuple(int(x) for x in ks[i]), a, b, float(div[i, j, l]), float(ratio[i, j, l]))
        if ratio[i, j, l] < ctx.kappa:
            raise DivisorTooSmall(ks[i], a, b, abs(div[i, j, l]), ctx.kappa * thresh[j, l])
    safe = np.where(excluded, 1.0, div)
    Sp = np.where(excluded, 0.0, -1j * Qp / safe)
    S_coeffs = P[None] @ Sp @ P.conj().T[None]

    full = np.zeros_like(Q.coeffs)
    full[active] = S_coeffs
    S = QuasiPeriodicMatrix(basis, Q.ks, full, sigma_prime if sigma_prime is not None else Q.sigma)
    zero_idx = Q.index((0,) * Q.n)
    N_tilde = block_diagonal_part(BlockMatrix(basis, Q.coeffs[zero_idx]))
    N_tilde = BlockMatrix(basis, 0.5 * (N_tilde.data + N_tilde.data.conj().T))

    # divisor bound per block: |B| <= loss * |A| / (kappa (1 + |dw|))
    nA = block_norms(basis, coeffs)
    nB = block_norms(basis, S_coeffs)
    dist = 1.0 + np.abs(basis.cluster_weights[:, None] - basis.cluster_weights[None, :])
    bound = ctx.loss_factor() * nA / (ctx.kappa * dist)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(nB > 0, nB / np.where(bound > 0, bound, np.inf), 0.0)
    bound_ratio = float(np.max(r, initial=0.0))

    if cross_check:
        for i, k in enumerate(ks):
            for a, sa in enumerate(basis.slices):
                for b, sb in enumerate(basis.slices):
                    if a == b and not np.any(k):
                        continue
                    B = solve_small_divisor(-1j * coeffs[i][sa, sb], ctx, a, b, k)
                    gap = np.max(np.abs(B - S_coeffs[i][sa, sb]))
                    if gap > 1e-12 * max(1.0, float(np.max(np.abs(B)))):
                        raise ArithmeticError(f"block solve mismatch {gap:.2e} at k={tuple(k)}")

    return HomologySolution(S=S, N_tilde=N_tilde, R=tail, K=ctx.K,
                            worst_divisor=worst, bound_ratio=bound_ratio)


def homological_residual(sol, N, Q, omega):
    """Max over retained ``k`` and cluster pairs of the Fourier residual

    ``-i k.omega S(k) + i [N, S(k)] + Q(k) - delta_{k0} N_tilde``.
    """
    basis = N.basis
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    active = Q.l1_orders() <= sol.K
    ks = Q.ks[active]
    Sk = sol.S.resized(Q.K_store).coeffs[active]
    kw = ks.astype(float) @ omega
    res = (-1j * kw[:, None, None] * Sk
           + 1j * (N.data[None] @ Sk - Sk @ N.data[None])
           + Q.coeffs[active])
    zero = np.all(ks == 0, axis=1)
    res[zero] -= sol.N_tilde.data
    if res.size == 0:
        return 0.0
    return float(np.max(block_norms(basis, res)))


def homology_estimates(sol, ctx, sigma, sigma_prime, N=None, Q=None, domega_step=None, beta=None):
    """Norms of the step: ``[N_tilde]``, tail ``[R]``, ``[S]_{beta+}``.

    With ``N``, ``Q`` and ``domega_step`` the omega-derivative of ``S`` is
    estimated by centred differences at ``h`` and ``h/2``.
    """
    beta = ctx.beta if beta is None else beta
    est = {
        "N_tilde": decay_norm(sol.N_tilde, beta).norm,
        "R": coefficient_norm(sol.R, beta, sigma_prime),
        "S_plus": strip_norm(sol.S, beta, sigma_prime, plus=True),
    }
    if Q is not None:
        est["Q"] = strip_norm(Q, beta, sigma)
    if N is not None and Q is not None and domega_step is not None:
        def deriv(h):
            hv = h * np.abs(ctx.omega).max()
            # neighbours may sit a hair below the gap that was screened at omega
            loose = replace(ctx, kappa=0.5 * ctx.kappa)
            sp = homological_step(N, Q, loose.with_omega(ctx.omega + hv), sigma_prime)
            sm = homological_step(N, Q, loose.with_omega(ctx.omega - hv), sigma_prime)
            return (sp.S - sm.S) * (1.0 / (2 * hv))
        d1 = deriv(domega_step)
        d2 = deriv(domega_step / 2)
        est["dS_plus"] = strip_norm(d2, beta, sigma_prime, plus=True)
        scale = max(d2.max_abs(), 1e-300)
        est["dS_richardson_gap"] = float(np.max(np.abs(d1.coeffs - d2.coeffs))) / scale
        est["dN_tilde"] = 0.0
    sol.estimates.update(est)
    return est
