"""Direct integration of the truncated forced oscillator and certification.

The direct system is ``xi' = -i (N_0 + eps Q^T(omega t)) xi``.  Propagators
are exponentials of Hermitian Magnus generators, so they are unitary to
roundoff.  For one frequency the forcing is periodic and long runs reuse
the one-period monodromy.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .blockmat import BlockMatrix, sobolev_norm

logger = logging.getLogger(__name__)

SCHEMES = ("magnus2", "magnus4")
_G = math.sqrt(3) / 6


class StepSizeError(RuntimeError):
    """Raised when the L2 norm drifts beyond the allowed tolerance."""


@dataclass
class Trajectory:
    basis: object
    times: np.ndarray
    xi: np.ndarray
    scheme: str
    dt: float
    norm_drift: float
    meta: dict = field(default_factory=dict)

    def norms(self, s):
        return sobolev_norm(self.basis, self.xi, s)

    def at(self, i):
        from .blockmat import SequenceVector
        return SequenceVector(self.basis, self.xi[i])


def default_dt(W_max, omega):
    return min(0.01, 0.1 / W_max, 0.1 / float(np.max(np.abs(omega))))


class _Generator:
    """``A(t) = N_0 + eps Q^T(omega t)`` and its Magnus generators in batches.

    The forcing has few Fourier modes ``C_k``, so the commutators entering
    the fourth-order generator are precomputed and combined with phases.
    """

    def __init__(self, N0, Q, eps, omega):
        self.N0 = N0.data if isinstance(N0, BlockMatrix) else np.asarray(N0)
        self.dim = self.N0.shape[0]
        self.omega = np.atleast_1d(np.asarray(omega, dtype=float))
        keep = np.max(np.abs(Q.coeffs), axis=(1, 2)) > 0 if eps != 0 else np.zeros(len(Q.ks), bool)
        self.kw = Q.ks[keep].astype(float) @ self.omega
        C = eps * np.transpose(Q.coeffs[keep], (0, 2, 1))
        sq = self.dim * self.dim
        self.C = C.reshape(len(C), sq)
        N = self.N0
        self.D = np.array([N @ c - c @ N for c in C]).reshape(len(C), sq)
        self.F = np.array([a @ b - b @ a for a in C for b in C]).reshape(len(C) ** 2, sq)

    def _shape(self, flat):
        return flat.reshape(-1, self.dim, self.dim)

    def __call__(self, t):
        t = np.atleast_1d(t)
        out = np.broadcast_to(self.N0, (len(t), self.dim, self.dim)).astype(complex)
        if len(self.kw):
            out += self._shape(np.exp(1j * t[:, None] * self.kw[None, :]) @ self.C)
        return out

    def magnus4(self, starts, dt):
        """``0.5 dt (A1 + A2) - i sqrt(3)/12 dt^2 [A2, A1]`` at the Gauss nodes of each step."""
        H = np.broadcast_to(dt * self.N0, (len(starts), self.dim, self.dim)).astype(complex)
        if not len(self.kw):
            return H
        E1 = np.exp(1j * (starts + (0.5 - _G) * dt)[:, None] * self.kw[None, :])
        E2 = np.exp(1j * (starts + (0.5 + _G) * dt)[:, None] * self.kw[None, :])
        m = len(self.kw)
        comm = (E1 - E2) @ self.D + (E2[:, :, None] * E1[:, None, :]).reshape(-1, m * m) @ self.F
        H = H + self._shape(0.5 * dt * (E1 + E2) @ self.C - 1j * (math.sqrt(3) / 12) * dt ** 2 * comm)
        return H


def _expm_hermitian(H):
    """``exp(-i H)`` for a stack of Hermitian matrices, unitary to roundoff."""
    lam, V = np.linalg.eigh(H)
    return (V * np.exp(-1j * lam)[:, None, :]) @ np.conj(np.swapaxes(V, -1, -2))


def step_propagators(gen, t0, dt, nsteps, scheme="magnus4"):
    """Propagators ``exp(-i H_eff)`` of ``nsteps`` consecutive steps from ``t0``."""
    starts = t0 + dt * np.arange(nsteps)
    if scheme == "magnus2":
        H = dt * gen(starts + 0.5 * dt)
    elif scheme == "magnus4":
        H = gen.magnus4(starts, dt)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    H = 0.5 * (H + np.conj(np.swapaxes(H, -1, -2)))
    return _expm_hermitian(H)


def integrate_direct(N0, Q, eps, omega, xi0, T, dt=None, scheme="magnus4", sample_every=1,
                     chunk=4096, drift_tol=1e-6):
    """Integrate ``xi' = -i (N_0 + eps Q^T(omega t)) xi`` on ``[0, T]``.

    The step is adjusted so that an integer number of steps covers ``T``;
    every ``sample_every``-th state is kept.
    """
    basis = Q.basis
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    dt = dt or default_dt(basis.W_max, omega)
    nsteps = max(1, int(math.ceil(T / dt - 1e-12)))
    dt = T / nsteps
    gen = _Generator(N0, Q, eps, omega)
    v = np.asarray(xi0, dtype=complex).copy()
    n0 = np.linalg.norm(v)
    times = [0.0]
    states = [v.copy()]
    done = 0
    while done < nsteps:
        m = min(chunk, nsteps - done)
        U = step_propagators(gen, done * dt, dt, m, scheme)
        for i in range(m):
            v = U[i] @ v
            if (done + i + 1) % sample_every == 0 or done + i + 1 == nsteps:
                times.append((done + i + 1) * dt)
                states.append(v.copy())
        done += m
    xi = np.array(states)
    drift = float(np.max(np.abs(np.linalg.norm(xi, axis=1) - n0))) / max(n0, 1e-300)
    if drift > drift_tol:
        raise StepSizeError(f"L2 norm drift {drift:.2e} exceeds {drift_tol:.1e}; reduce dt")
    return Trajectory(basis, np.array(times), xi, scheme, dt, drift)


def integrate_periodic(N0, Q, eps, omega, xi0, T, dt=None, scheme="magnus4", samples_per_period=64):
    """Long-time integration for ``n = 1`` via the one-period monodromy.

    The period ``P = 2 pi / omega`` is split into an integer number of
    steps; states are reported at ``samples_per_period`` points per period.
    """
    basis = Q.basis
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if len(omega) != 1:
        raise ValueError("periodic fast path needs a single frequency")
    P = 2 * math.pi / abs(omega[0])
    dt = dt or default_dt(basis.W_max, omega)
    per = int(math.ceil(P / dt / samples_per_period)) * samples_per_period
    dt = P / per
    stride = per // samples_per_period
    gen = _Generator(N0, Q, eps, omega)
    U = step_propagators(gen, 0.0, dt, per, scheme)
    dim = basis.size
    partial = np.empty((samples_per_period, dim, dim), dtype=complex)
    acc = np.eye(dim, dtype=complex)
    for i in range(per):
        acc = U[i] @ acc
        if (i + 1) % stride == 0:
            partial[(i + 1) // stride - 1] = acc
    monodromy = partial[-1]
    n_periods = int(math.ceil(T / P))
    v = np.asarray(xi0, dtype=complex).copy()
    times = [0.0]
    states = [v.copy()]
    tau = P * np.arange(1, samples_per_period + 1) / samples_per_period
    for j in range(n_periods):
        block = partial @ v
        ts = j * P + tau
        keep = ts <= T + 1e-9
        times.extend(ts[keep])
        states.extend(block[keep])
        v = monodromy @ v
    xi = np.array(states)
    n0 = np.linalg.norm(xi0)
    drift = float(np.max(np.abs(np.linalg.norm(xi, axis=1) - n0))) / max(n0, 1e-300)
    return Trajectory(basis, np.array(times), xi, scheme, dt, drift,
                      meta={"period": P, "steps_per_period": per})


def integrate_reference(N0, Q, eps, omega, xi0, times, rtol=1e-12, atol=1e-13):
    """Explicit DOP853 reference with renormalisation at the output times."""
    gen = _Generator(N0, Q, eps, omega)
    basis = Q.basis
    dim = basis.size
    xi0 = np.asarray(xi0, dtype=complex)

    def rhs(t, y):
        z = y[:dim] + 1j * y[dim:]
        dz = -1j * (gen(t)[0] @ z)
        return np.concatenate([dz.real, dz.imag])

    times = np.asarray(times, dtype=float)
    sol = solve_ivp(rhs, (0.0, float(times[-1])), np.concatenate([xi0.real, xi0.imag]),
                    method="DOP853", t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(sol.message)
    xi = (sol.y[:dim] + 1j * sol.y[dim:]).T
    n0 = np.linalg.norm(xi0)
    norms = np.linalg.norm(xi, axis=1)
    drift = float(np.max(np.abs(norms - n0))) / n0
    xi = xi * (n0 / norms)[:, None]
    return Trajectory(basis, times, xi, "dop853", float("nan"), drift)


def step_halving_gap(N0, Q, eps, omega, xi0, T, dt=None, scheme="magnus4"):
    """Endpoint change when the step is halved."""
    omega = np.atleast_1d(omega)
    dt = dt or default_dt(Q.basis.W_max, omega)
    a = integrate_direct(N0, Q, eps, omega, xi0, T, dt, scheme, sample_every=10 ** 9)
    b = integrate_direct(N0, Q, eps, omega, xi0, T, dt / 2, scheme, sample_every=10 ** 9)
    return float(np.linalg.norm(a.xi[-1] - b.xi[-1]))


def conjugacy_error(kam, traj, s=1.0, return_series=False):
    """``sup_t || xi_direct(t) - conj(M(omega t)) e^{-itN^T} M(0)^T xi(0) ||_s``."""
    predicted = kam.closed_form(traj.xi[0], traj.times)
    err = sobolev_norm(traj.basis, traj.xi - predicted, s)
    if return_series:
        return float(np.max(err)), err
    return float(np.max(err))


def sobolev_monitor(traj, s):
    """Extremal ratios ``||xi(t)||_s / ||xi(0)||_s`` along a trajectory."""
    norms = traj.norms(s)
    r = norms / norms[0]
    return float(np.min(r)), float(np.max(r))


def quasi_energies(N_omega, omega, k_range):
    """``{mu_a + k.omega}`` for block eigenvalues ``mu_a`` and ``|k|_inf <= k_range``."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    basis = N_omega.basis
    mu = np.concatenate([np.linalg.eigvalsh(N_omega.data[s, s]) for s in basis.slices])
    grids = np.meshgrid(*([np.arange(-k_range, k_range + 1)] * len(omega)), indexing="ij")
    kw = np.stack([g.ravel() for g in grids], axis=-1) @ omega
    return np.sort((mu[:, None] + kw[None, :]).ravel())


def block_shifts(W, iota):
    """``||W_[a]^[a]||`` and the weights ``(1 + ln w_a)^(2 iota)`` per cluster."""
    basis = W.basis
    shifts = np.array([np.linalg.norm(W.data[s, s], 2) for s in basis.slices])
    return shifts, (1.0 + np.log(basis.cluster_weights)) ** (2 * iota)
