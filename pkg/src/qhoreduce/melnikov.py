"""Frequency screening against first and second Melnikov conditions.

Divisors are ``k.omega - lambda_a + lambda_b`` normalised by
``1 + |w_a - w_b|``.  For unperturbed eigenvalues ``lambda = w`` only the
difference ``w_a - w_b`` matters, so scans run over the difference set.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .basis import enumerate_modes

logger = logging.getLogger(__name__)


def exponents(n, d):
    """``tau_1, tau_2, alpha_1, alpha_2, alpha`` for ``lambda = w``."""
    tau1, tau2 = n + 1, 1
    alpha1 = max(tau1, n + d)
    alpha2 = max(tau2, 1)
    return {"tau1": tau1, "tau2": tau2, "alpha1": alpha1, "alpha2": alpha2,
            "alpha": alpha1 / alpha2 + 1}


def lattice(n, K, include_zero=False):
    """Integer vectors with ``0 < |k|_1 <= K`` (or ``<= K`` with zero)."""
    ks = [k for k in itertools.product(range(-K, K + 1), repeat=n)
          if sum(abs(x) for x in k) <= K and (include_zero or any(k))]
    return np.array(ks, dtype=int).reshape(-1, n)


def half_lattice(n, K):
    """One representative of every pair ``{k, -k}`` with ``0 < |k|_1 <= K``."""
    ks = lattice(n, K)
    keep = [k for k in ks if tuple(k) > tuple(-k)]
    return np.array(keep, dtype=int).reshape(-1, n)


def check_H1(lam, w=None):
    """Largest ``c0`` with ``lambda_a >= c0`` and ``|lambda_a - lambda_b| >= c0 |w_a - w_b|``."""
    lam = np.asarray(lam, dtype=float)
    if w is None:
        w = lam
    w = np.asarray(w, dtype=float)
    c0 = float(np.min(lam))
    dl = np.abs(lam[:, None] - lam[None, :])
    dw = np.abs(w[:, None] - w[None, :])
    mask = dw > 0
    if np.any(mask):
        c0 = min(c0, float(np.min(dl[mask] / dw[mask])))
    return c0


@dataclass
class ScreenReport:
    omega: np.ndarray
    K: int
    gamma: float
    kappa: float
    passed: bool
    worst_first: tuple = None
    worst_second: tuple = None

    @property
    def pass_(self):
        return self.passed

    def to_dict(self):
        return {
            "omega": [float(x) for x in np.atleast_1d(self.omega)],
            "K": self.K,
            "gamma": self.gamma,
            "kappa": self.kappa,
            "pass": self.passed,
            "worst_first": _jsonable(self.worst_first),
            "worst_second": _jsonable(self.worst_second),
        }


def _jsonable(worst):
    if worst is None:
        return None
    k, a, b, value, ratio = worst
    return {"k": list(k), "a": a, "b": b, "value": value, "ratio": ratio}


def _basis_of(W_max, d, basis):
    return basis if basis is not None else enumerate_modes(d, W_max)


def first_melnikov_worst(omega, K, basis, lam=None):
    """Worst normalised first-Melnikov divisor ``(k, a, b, value, ratio)``."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    ks = lattice(len(omega), K, include_zero=True)
    w = basis.cluster_weights
    kw = ks.astype(float) @ omega
    if lam is None:
        nc = basis.n_clusters
        delta = 2 * np.arange(-(nc - 1), nc)
        value = kw[:, None] - delta[None, :]
        ratio = np.abs(value) / (1.0 + np.abs(delta))[None, :]
        ratio[np.all(ks == 0, axis=1)[:, None] & (delta == 0)[None, :]] = np.inf
        i, j = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
        dj = int(delta[j]) // 2
        a, b = (dj, 0) if dj >= 0 else (0, -dj)
        return tuple(int(x) for x in ks[i]), a, b, float(value[i, j]), float(ratio[i, j])
    lam = np.asarray(lam, dtype=float)
    value = kw[:, None, None] - lam[None, :, None] + lam[None, None, :]
    ratio = np.abs(value) / (1.0 + np.abs(w[:, None] - w[None, :]))[None]
    eye = np.eye(len(lam), dtype=bool)
    ratio[np.all(ks == 0, axis=1)[:, None, None] & eye[None]] = np.inf
    i, a, b = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
    return tuple(int(x) for x in ks[i]), int(a), int(b), float(value[i, a, b]), float(ratio[i, a, b])


def screen_omega(omega, K, gamma, lam=None, W_max=None, d=1, basis=None):
    """First Melnikov screen over ``|k|_1 <= K`` and retained clusters."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    basis = _basis_of(W_max, d, basis)
    worst = first_melnikov_worst(omega, K, basis, lam)
    return ScreenReport(np.atleast_1d(omega), K, float(gamma), float("nan"),
                        worst[4] >= gamma, worst_first=worst)


def second_melnikov_worst(omega, K, basis, mu):
    """Worst ``|k.omega - mu_j + mu_l| / (1 + |w_a - w_b|)`` over modes."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    alpha = np.concatenate([np.asarray(m, dtype=float) for m in mu])
    if len(alpha) != basis.size:
        raise ValueError("eigenvalue lists do not cover the basis")
    ks = lattice(len(omega), K, include_zero=True)
    kw = ks.astype(float) @ omega
    w = basis.weights
    cl = basis.mode_cluster
    value = kw[:, None, None] - alpha[None, :, None] + alpha[None, None, :]
    ratio = np.abs(value) / (1.0 + np.abs(w[:, None] - w[None, :]))[None]
    same = cl[:, None] == cl[None, :]
    ratio[np.all(ks == 0, axis=1)[:, None, None] & same[None]] = np.inf
    i, j, l = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
    return (tuple(int(x) for x in ks[i]), int(cl[j]), int(cl[l]),
            float(value[i, j, l]), float(ratio[i, j, l]))


def screen_mu(omega, K, kappa, mu, basis, gamma=None):
    """Second Melnikov screen on perturbed block eigenvalues ``mu``."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    worst2 = second_melnikov_worst(omega, K, basis, mu)
    passed = worst2[4] >= kappa
    worst1 = None
    if gamma is not None:
        worst1 = first_melnikov_worst(omega, K, basis)
        passed = passed and worst1[4] >= gamma
    return ScreenReport(np.atleast_1d(omega), K, float(gamma) if gamma else float("nan"),
                        float(kappa), bool(passed), worst_first=worst1, worst_second=worst2)


@dataclass
class MeasureEstimate:
    n_points: int
    resolution: float
    K: int
    gamma: float
    fraction: float
    tau1: int
    tau2: int
    alpha1: int
    alpha2: int
    alpha: float
    C: float = None
    extra: dict = field(default_factory=dict)

    @property
    def bound(self):
        if self.C is None:
            return None
        return self.C * self.K ** self.tau1 * self.gamma ** self.tau2

    def normalised(self):
        """``fraction / (K^tau1 gamma^tau2)``: the constant this point needs."""
        return self.fraction / (self.K ** self.tau1 * self.gamma ** self.tau2)


def omega_grid(n, points, low=0.0, high=2 * np.pi):
    """Uniform midpoint grid with ``points`` nodes per axis, endpoints excluded."""
    points = int(points)
    axis = low + (high - low) * (np.arange(points) + 0.5) / points
    if n == 1:
        return axis[:, None]
    grids = np.meshgrid(*([axis] * n), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _first_ratio_grid(omegas, K, basis, full_scan=False, chunk=1 << 16):
    """Minimum normalised divisor at each grid point (``lambda = w``)."""
    nc = basis.n_clusters
    dmax = 2 * (nc - 1)
    n = omegas.shape[1]
    out = np.full(len(omegas), np.inf)
    # k = 0 pairs contribute |Delta| / (1 + |Delta|) >= 2/3
    if nc > 1:
        out[:] = 2.0 / 3.0
    ks = half_lattice(n, K)
    deltas = 2 * np.arange(-(nc - 1), nc)
    for start in range(0, len(omegas), chunk):
        om = omegas[start:start + chunk]
        best = out[start:start + chunk]
        for k in ks:
            kw = om @ k.astype(float)
            if full_scan:
                r = np.min(np.abs(kw[:, None] - deltas[None, :]) / (1.0 + np.abs(deltas))[None, :], axis=1)
            else:
                lo = np.clip(2 * np.floor(kw / 2), -dmax, dmax)
                hi = np.clip(lo + 2, -dmax, dmax)
                cands = [lo, hi, np.zeros_like(kw), np.full_like(kw, dmax), np.full_like(kw, -dmax)]
                r = np.min([np.abs(kw - c) / (1.0 + np.abs(c)) for c in cands], axis=0)
            np.minimum(best, r, out=best)
    return out


def measure_estimate(omegas, K, gamma, W_max=None, d=1, basis=None, lam=None, C=None, full_scan=False):
    """Fraction of the ``omega`` grid failing the first Melnikov screen."""
    basis = _basis_of(W_max, d, basis)
    omegas = np.asarray(omegas, dtype=float)
    if omegas.ndim == 1:
        omegas = omegas[:, None]
    n = omegas.shape[1]
    n_points = len(omegas)
    per_axis = round(n_points ** (1.0 / n))
    resolution = 2 * np.pi / per_axis
    if resolution > gamma / (2 * K):
        logger.warning("omega grid spacing %.2e is coarser than gamma/(2K) = %.2e",
                       resolution, gamma / (2 * K))
    if lam is None:
        ratios = _first_ratio_grid(omegas, K, basis, full_scan=full_scan)
    else:
        ratios = np.array([first_melnikov_worst(om, K, basis, lam)[4] for om in omegas])
    fraction = float(np.mean(ratios < gamma))
    ex = exponents(n, basis.d)
    return MeasureEstimate(n_points=n_points, resolution=float(resolution), K=int(K),
                           gamma=float(gamma), fraction=fraction, C=C, **ex)


def fit_measure_constant(estimates):
    """Smallest ``C`` with ``fraction <= C K^tau1 gamma^tau2`` on every estimate."""
    return max(e.normalised() for e in estimates)


def sublevel_fraction(f_values, kappa):
    """Fraction of samples with ``|f| <= kappa`` (grid stand-in for a measure on [0, 1])."""
    return float(np.mean(np.abs(np.asarray(f_values)) <= kappa))


def screening_sweep(omegas, K, gamma, basis, kappa=None, mu=None):
    """Rows ``(omega..., pass, worst_first, worst_second)`` for a grid."""
    rows = []
    for om in np.atleast_2d(omegas):
        w1 = first_melnikov_worst(om, K, basis)[4]
        w2 = second_melnikov_worst(om, K, basis, mu)[4] if mu is not None else math.nan
        ok = w1 >= gamma and (mu is None or w2 >= kappa)
        rows.append(tuple(float(x) for x in om) + (bool(ok), w1, w2))
    return rows


def find_screened_omega(K, gamma, basis, candidates=None, n=1):
    """First candidate passing the screen; defaults to a few badly approximable numbers."""
    if candidates is None:
        golden = (1 + math.sqrt(5)) / 2
        candidates = [math.sqrt(5) - 1, golden, math.sqrt(2), 2 * math.pi - golden]
    for om in candidates:
        om = np.atleast_1d(om)[:n] if np.ndim(om) else np.full(n, om)
        if screen_omega(om, K, gamma, basis=basis).passed:
            return om
    return None
