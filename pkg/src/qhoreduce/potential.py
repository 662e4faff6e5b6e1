"""Quasi-periodic perturbation matrices in the Hermite basis.

The canonical family is ``V(x, phi) = A * g(|x|^2) * T(phi)`` with
``g(r) = (1 + ln(1 + r))**(-2 iota)`` and ``T`` a real trigonometric
polynomial on the n-torus.  Its matrix ``Q(phi)`` is stored through the
Fourier coefficients ``Q_hat(k)``.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .basis import basis_on_nodes, enumerate_modes, gauss_hermite
from .blockmat import BlockMatrix, block_norms, distance_weights, log_weights
from .exceptions import BasisMismatchError, QuadratureError, StripError

logger = logging.getLogger(__name__)

FAMILIES = ("canonical", "cosx")


def log_decay_profile(r, iota):
    """``(1 + ln(1 + r))**(-2 iota)`` for ``r = |x|^2``."""
    return (1.0 + np.log1p(r)) ** (-2.0 * iota)


def _as_key(k, n):
    k = tuple(int(x) for x in np.atleast_1d(k))
    if len(k) != n:
        raise ValueError(f"Fourier index {k} does not have length {n}")
    return k


@dataclass
class PotentialSpec:
    """Parameters of a log-decay quasi-periodic potential.

    ``fourier_coeffs`` maps integer tuples ``k`` to the coefficients of
    ``T(phi) = sum_k T_hat(k) exp(i k.phi)``.  The ``"cosx"`` family
    multiplies the spatial profile by ``cos(x_1)``; it has no separable
    shortcut and goes through full tensor quadrature.
    """

    dimension: int = 1
    iota: float = 1.0
    amplitude: float = 1.0
    torus_dim: int = 1
    sigma: float = 1.0
    fourier_coeffs: dict = field(default_factory=lambda: {(1,): 0.5, (-1,): 0.5})
    family: str = "canonical"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown potential family {self.family!r}")
        if self.dimension < 1 or self.torus_dim < 1:
            raise ValueError("dimension and torus_dim must be >= 1")
        if self.iota < 0 or self.sigma <= 0:
            raise ValueError("iota must be >= 0 and sigma > 0")
        coeffs = {}
        for k, v in dict(self.fourier_coeffs).items():
            coeffs[_as_key(k, self.torus_dim)] = complex(v)
        self.fourier_coeffs = coeffs
        for k, v in coeffs.items():
            partner = coeffs.get(tuple(-x for x in k), 0.0)
            if abs(partner - np.conj(v)) > 1e-14 * max(1.0, abs(v)):
                raise ValueError(f"T is not real: T_hat{k} and T_hat(-k) are not conjugate")

    @property
    def degree(self):
        return max((sum(abs(x) for x in k) for k in self.fourier_coeffs), default=0)

    def spatial(self, x):
        """Spatial factor at points ``x`` of shape ``(npts, d)``."""
        r = np.sum(x * x, axis=-1)
        g = self.amplitude * log_decay_profile(r, self.iota)
        if self.family == "cosx":
            g = g * np.cos(x[:, 0])
        return g

    def torus_factor(self, phi):
        """``T(phi)`` at points ``phi`` of shape ``(npts, n)``; complex allowed."""
        phi = np.atleast_2d(phi)
        out = np.zeros(phi.shape[0], dtype=complex)
        for k, v in self.fourier_coeffs.items():
            out += v * np.exp(1j * phi @ np.array(k, dtype=float))
        return out

    def __call__(self, x, phi):
        return self.spatial(np.atleast_2d(x)) * self.torus_factor(phi)

    def to_dict(self):
        return {
            "dimension": self.dimension,
            "iota": self.iota,
            "amplitude": self.amplitude,
            "torus_dim": self.torus_dim,
            "sigma": self.sigma,
            "family": self.family,
            "fourier_coeffs": [
                {"k": list(k), "re": v.real, "im": v.imag}
                for k, v in sorted(self.fourier_coeffs.items())
            ],
        }

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload)
        raw = payload.pop("fourier_coeffs", None)
        if raw is not None:
            coeffs = {}
            for item in raw:
                value = item.get("value", complex(item.get("re", 0.0), item.get("im", 0.0)))
                coeffs[tuple(item["k"])] = value
            payload["fourier_coeffs"] = coeffs
        return cls(**payload)


def fourier_box(n, K):
    """All ``k`` in ``Z^n`` with ``max|k_i| <= K`` in lexicographic order."""
    return np.array(list(itertools.product(range(-K, K + 1), repeat=n)), dtype=int).reshape(-1, n)


def torus_grid(n, L, imag=None):
    """Uniform ``L^n`` grid on the torus, optionally shifted by ``1j * imag``."""
    theta = 2 * np.pi * np.arange(L) / L
    grids = np.meshgrid(*([theta] * n), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1).astype(complex)
    if imag is not None:
        pts = pts + 1j * np.asarray(imag, dtype=float)
    return pts


class QuasiPeriodicMatrix:
    """Fourier family ``{Q_hat(k)}`` of block matrices on a common truncation.

    ``coeffs[i]`` is the coefficient of ``exp(i ks[i].phi)``; ``ks`` is the
    full box ``max|k_i| <= K_store``.  ``sigma`` is the half-width of the
    analyticity strip.
    """

    def __init__(self, basis, ks, coeffs, sigma=np.inf):
        ks = np.asarray(ks, dtype=int)
        coeffs = np.asarray(coeffs, dtype=complex)
        if ks.ndim != 2 or coeffs.shape != (ks.shape[0], basis.size, basis.size):
            raise ValueError("coefficient array does not match the Fourier index set")
        self.basis = basis
        self.ks = ks
        self.coeffs = coeffs
        self.sigma = float(sigma)
        self._index = {tuple(k): i for i, k in enumerate(ks)}

    @property
    def n(self):
        return self.ks.shape[1]

    @property
    def K_store(self):
        return int(np.max(np.abs(self.ks))) if len(self.ks) else 0

    @classmethod
    def zeros(cls, basis, n, K_store=0, sigma=np.inf):
        ks = fourier_box(n, K_store)
        return cls(basis, ks, np.zeros((len(ks), basis.size, basis.size)), sigma)

    @classmethod
    def constant(cls, matrix, n, K_store=0, sigma=np.inf):
        data = matrix.data if isinstance(matrix, BlockMatrix) else np.asarray(matrix)
        out = cls.zeros(matrix.basis, n, K_store, sigma)
        out.coeffs[out.index((0,) * n)] = data
        return out

    def index(self, k):
        return self._index[_as_key(k, self.n)]

    def __getitem__(self, k):
        key = _as_key(k, self.n)
        if key not in self._index:
            return BlockMatrix.zeros(self.basis)
        return BlockMatrix(self.basis, self.coeffs[self._index[key]])

    def copy(self):
        return QuasiPeriodicMatrix(self.basis, self.ks.copy(), self.coeffs.copy(), self.sigma)

    def _same_layout(self, other):
        if other.basis != self.basis:
            raise BasisMismatchError("quasi-periodic matrices live on different truncations")
        if other.ks.shape != self.ks.shape or np.any(other.ks != self.ks):
            other = other.resized(self.K_store)
        return other

    def __add__(self, other):
        other = self._same_layout(other)
        return QuasiPeriodicMatrix(self.basis, self.ks, self.coeffs + other.coeffs,
                                   min(self.sigma, other.sigma))

    def __sub__(self, other):
        other = self._same_layout(other)
        return QuasiPeriodicMatrix(self.basis, self.ks, self.coeffs - other.coeffs,
                                   min(self.sigma, other.sigma))

    def __mul__(self, scalar):
        return QuasiPeriodicMatrix(self.basis, self.ks, scalar * self.coeffs, self.sigma)

    __rmul__ = __mul__

    def resized(self, K_store):
        """Same family on a different storage box (dropping or zero-padding)."""
        ks = fourier_box(self.n, K_store)
        coeffs = np.zeros((len(ks), self.basis.size, self.basis.size), dtype=complex)
        for i, k in enumerate(ks):
            j = self._index.get(tuple(k))
            if j is not None:
                coeffs[i] = self.coeffs[j]
        return QuasiPeriodicMatrix(self.basis, ks, coeffs, self.sigma)

    def l1_orders(self):
        return np.sum(np.abs(self.ks), axis=1)

    def split(self, K):
        """``(low, tail)`` with ``|k|_1 <= K`` in ``low`` and the rest in ``tail``."""
        mask = self.l1_orders() <= K
        low = self.coeffs * mask[:, None, None]
        tail = self.coeffs * (~mask)[:, None, None]
        return (QuasiPeriodicMatrix(self.basis, self.ks, low, self.sigma),
                QuasiPeriodicMatrix(self.basis, self.ks, tail, self.sigma))

    def phases(self, phi):
        phi = np.atleast_2d(np.asarray(phi, dtype=complex))
        return np.exp(1j * phi @ self.ks.T.astype(float))

    def eval_grid(self, phi):
        """Values at points ``phi`` of shape ``(npts, n)``; returns ``(npts, dim, dim)``."""
        E = self.phases(phi)
        dim = self.basis.size
        return (E @ self.coeffs.reshape(len(self.ks), -1)).reshape(-1, dim, dim)

    def hermitian_symmetry_defect(self):
        """``max |Q_hat(-k) - Q_hat(k)^H|`` over stored ``k``."""
        worst = 0.0
        for i, k in enumerate(self.ks):
            j = self._index.get(tuple(-k))
            partner = self.coeffs[j] if j is not None else 0.0
            worst = max(worst, float(np.max(np.abs(partner - self.coeffs[i].conj().T))))
        return worst

    def max_abs(self):
        return float(np.max(np.abs(self.coeffs), initial=0.0))

    @classmethod
    def from_grid(cls, basis, values, L, K_store, sigma=np.inf):
        """Fourier coefficients from values on the uniform real grid ``torus_grid(n, L)``."""
        values = np.asarray(values, dtype=complex)
        n = int(round(math.log(values.shape[0], L))) if values.shape[0] > 1 else 1
        if L ** n != values.shape[0]:
            raise ValueError("grid size is not a power of L")
        if 2 * K_store + 1 > L:
            raise ValueError("grid too coarse for the requested storage box")
        ks = fourier_box(n, K_store)
        E = np.exp(-1j * torus_grid(n, L).real @ ks.T.astype(float))
        dim = basis.size
        coeffs = (E.T @ values.reshape(L ** n, -1)) / L ** n
        return cls(basis, ks, coeffs.reshape(len(ks), dim, dim), sigma)

    def __repr__(self):
        return (f"QuasiPeriodicMatrix(n={self.n}, K_store={self.K_store}, "
                f"size={self.basis.size}, sigma={self.sigma})")

    def to_dict(self):
        return {
            "d": self.basis.d,
            "W_max": self.basis.W_max,
            "sigma": None if math.isinf(self.sigma) else self.sigma,
            "ks": self.ks.tolist(),
            "re": self.coeffs.real.tolist(),
            "im": self.coeffs.imag.tolist(),
        }

    @classmethod
    def from_dict(cls, payload):
        basis = enumerate_modes(payload["d"], payload["W_max"])
        coeffs = np.array(payload["re"]) + 1j * np.array(payload["im"])
        sigma = payload.get("sigma")
        return cls(basis, payload["ks"], coeffs, np.inf if sigma is None else sigma)


def eval_Q(Q, phi):
    """``Q(phi)`` as a block matrix; ``phi`` may be complex inside the strip."""
    phi = np.atleast_1d(np.asarray(phi, dtype=complex))
    if phi.shape != (Q.n,):
        raise ValueError(f"phi must have length {Q.n}")
    if np.max(np.abs(phi.imag)) >= Q.sigma:
        raise StripError(f"|Im phi| = {np.max(np.abs(phi.imag))} is outside the strip {Q.sigma}")
    return BlockMatrix(Q.basis, Q.eval_grid(phi[None, :])[0])


def strip_points(n, sigma, n_theta):
    """Sample points on the distinguished boundary ``|Im phi_i| = sigma``."""
    if sigma == 0:
        return torus_grid(n, n_theta)
    pts = []
    for signs in itertools.product((-1.0, 1.0), repeat=n):
        pts.append(torus_grid(n, n_theta, imag=sigma * np.array(signs)))
    return np.concatenate(pts)


def default_theta_points(Q):
    return max(32, 4 * Q.K_store + 4) if Q.n == 1 else max(16, 2 * Q.K_store + 4)


def strip_norm(Q, beta, sigma, plus=False, n_theta=None):
    """``sup_{|Im phi| <= sigma} |Q(phi)|_beta`` (or the ``beta+`` norm).

    The block norms are log-subharmonic in each angle, so the supremum sits
    on ``|Im phi_i| = sigma``; it is sampled there on a uniform grid in the
    real parts.
    """
    n_theta = n_theta or default_theta_points(Q)
    vals = Q.eval_grid(strip_points(Q.n, sigma, n_theta))
    lw = log_weights(Q.basis, beta)
    wts = lw[:, None] * lw[None, :]
    if plus:
        wts = wts * distance_weights(Q.basis)
    norms = block_norms(Q.basis, vals) * wts
    return float(np.max(norms, initial=0.0))


def coefficient_norm(Q, beta, sigma, plus=False):
    """``sum_k e^{|k|_1 sigma} |Q_hat(k)|_beta``: a bound on :func:`strip_norm`."""
    lw = log_weights(Q.basis, beta)
    wts = lw[:, None] * lw[None, :]
    if plus:
        wts = wts * distance_weights(Q.basis)
    per_k = np.max(block_norms(Q.basis, Q.coeffs) * wts, axis=(1, 2), initial=0.0)
    return float(np.sum(per_k * np.exp(Q.l1_orders() * sigma)))


def default_quad_order(basis):
    # the log profile is analytic only for |Im x| < 1, so small cutoffs
    # still need a floor on the node count
    return max(4 * (basis.W_max + 10), 160)


def spatial_matrix(basis, spatial, quad_order):
    """``int f(x) Phi_a(x) Phi_b(x) dx`` on a tensor Gauss-Hermite grid."""
    nodes, weights = gauss_hermite(quad_order)
    vals, points = basis_on_nodes(basis, nodes)
    w = weights
    for _ in range(basis.d - 1):
        w = np.multiply.outer(w, weights)
    wv = np.ravel(w) * spatial(points)
    return (vals * wv) @ vals.T


def _torus_values(basis, spec, quad_order, L):
    nodes, weights = gauss_hermite(quad_order)
    vals, points = basis_on_nodes(basis, nodes)
    w = weights
    for _ in range(basis.d - 1):
        w = np.multiply.outer(w, weights)
    w = np.ravel(w)
    phis = torus_grid(spec.torus_dim, L).real
    out = np.empty((len(phis), basis.size, basis.size), dtype=complex)
    for i, phi in enumerate(phis):
        pot = spec(points, phi[None, :])
        out[i] = (vals * (w * pot)) @ vals.T
    return out


def assemble_Q(spec, basis, quad_order=None, K_store=None, check=True, tol=1e-8):
    """Assemble the Fourier coefficients of ``Q(phi)`` for a potential.

    Separable (canonical) potentials factor exactly as ``T_hat(k) * G`` with
    ``G`` the spatial matrix.  Other families are sampled on a torus grid
    and transformed.  With ``check`` the quadrature order is doubled and the
    largest entry change must stay below ``tol``.
    """
    if basis.d != spec.dimension:
        raise ValueError("basis and potential dimensions differ")
    if basis.d > 2:
        logger.warning("assembly in d=%d uses a dense tensor grid and is slow", basis.d)
    quad_order = quad_order or default_quad_order(basis)
    n = spec.torus_dim
    if K_store is None:
        K_store = max((max(abs(x) for x in k) for k in spec.fourier_coeffs), default=0)

    if spec.family == "canonical":
        def build(order):
            G = spatial_matrix(basis, spec.spatial, order)
            ks = fourier_box(n, K_store)
            coeffs = np.zeros((len(ks), basis.size, basis.size), dtype=complex)
            for i, k in enumerate(ks):
                coeffs[i] = spec.fourier_coeffs.get(tuple(k), 0.0) * G
            return coeffs, ks
    else:
        deg = max((max(abs(x) for x in k) for k in spec.fourier_coeffs), default=0)
        L = 2 * max(K_store, deg) + 2

        def build(order):
            values = _torus_values(basis, spec, order, L)
            Qg = QuasiPeriodicMatrix.from_grid(basis, values, L, K_store)
            return Qg.coeffs, Qg.ks

    coeffs, ks = build(quad_order)
    if check:
        coeffs2, _ = build(2 * quad_order)
        change = float(np.max(np.abs(coeffs2 - coeffs), initial=0.0))
        if change > tol:
            raise QuadratureError(
                f"quadrature not converged: doubling {quad_order} nodes changed entries by {change:.2e}",
                max_change=change,
            )
    coeffs = 0.5 * (coeffs + np.conj(np.transpose(coeffs[::-1], (0, 2, 1))))
    return QuasiPeriodicMatrix(basis, ks, coeffs, spec.sigma)


@dataclass
class DecayReport:
    iota: float
    sup: float
    argmax: tuple
    per_cutoff: dict = field(default_factory=dict)
    stable: bool = True
    spread: float = 0.0


def key_decay_sup(Q, iota):
    """``max_{k,a,b} (1 + ln w_a)^iota (1 + ln w_b)^iota |Q_hat(k)_[a]^[b]|``."""
    lw = log_weights(Q.basis, iota)
    norms = block_norms(Q.basis, Q.coeffs) * (lw[:, None] * lw[None, :])
    if norms.size == 0 or np.max(norms) == 0:
        return 0.0, ((0,) * Q.n, 0, 0)
    i, a, b = np.unravel_index(int(np.argmax(norms)), norms.shape)
    return float(norms[i, a, b]), (tuple(int(x) for x in Q.ks[i]), int(a), int(b))


def verify_key_decay(Q, iota, cutoff_family=None, tolerance=0.15):
    """Weighted decay supremum of ``Q`` and, optionally, a cutoff sweep.

    ``cutoff_family`` maps ``W_max`` to an assembled matrix; the report is
    ``stable`` when all per-cutoff suprema lie within ``tolerance`` of the
    largest one.
    """
    sup, arg = key_decay_sup(Q, iota)
    report = DecayReport(iota=float(iota), sup=sup, argmax=arg)
    if cutoff_family:
        for W, Qw in sorted(cutoff_family.items()):
            report.per_cutoff[int(W)] = key_decay_sup(Qw, iota)[0]
        vals = np.array(list(report.per_cutoff.values()))
        top = float(np.max(vals))
        report.spread = float((top - np.min(vals)) / top) if top > 0 else 0.0
        report.stable = report.spread <= tolerance
    return report
