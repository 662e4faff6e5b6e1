"""Estimator-style front ends for reduction and frequency screening."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import (check_normal_form, check_omega, check_omega_grid, check_positive,
                          check_quasi_periodic, check_state, check_times)
from .basis import enumerate_modes
from .blockmat import BlockMatrix
from .kam import KamOptions, KamResult, kam_iterate, make_schedule
from .melnikov import exponents, first_melnikov_worst
from .potential import QuasiPeriodicMatrix, strip_norm


def trivial_result(N0, omega, schedule=None):
    """Result of reducing a zero perturbation: ``W = 0``, ``M = Id``."""
    basis = N0.basis
    n = len(omega)
    return KamResult(converged=True, N_omega=N0, W=BlockMatrix.zeros(basis),
                     M=QuasiPeriodicMatrix.constant(BlockMatrix.identity(basis), n),
                     S_list=[], history=[], omega=np.asarray(omega, dtype=float),
                     schedule=schedule)


class KAMReducer(BaseEstimator):
    """Reduce ``N_0 + Q_0(omega t)`` to a constant block-diagonal normal form.

    ``fit`` takes the assembled perturbation.  With ``normalize`` it is
    rescaled so that its strip norm ``[Q_0]_beta^sigma0`` equals ``eps0``;
    otherwise it is used as given.
    """

    def __init__(self, omega=None, eps0=1e-4, sigma0=1.0, beta=None, alpha=None, m_max=6,
                 normalize=True, K_box=None, kappa_cap="auto", enforce_smallness=True,
                 grid_points=None):
        self.omega = omega
        self.eps0 = eps0
        self.sigma0 = sigma0
        self.beta = beta
        self.alpha = alpha
        self.m_max = m_max
        self.normalize = normalize
        self.K_box = K_box
        self.kappa_cap = kappa_cap
        self.enforce_smallness = enforce_smallness
        self.grid_points = grid_points

    def fit(self, X, y=None, N0=None):
        Q = check_quasi_periodic(X)
        omega = check_omega(self.omega, Q.n)
        eps0 = check_positive(self.eps0, "eps0", allow_zero=True)
        basis = Q.basis
        N0 = BlockMatrix.diagonal(basis) if N0 is None else check_normal_form(N0, basis)
        alpha = self.alpha if self.alpha is not None else exponents(Q.n, basis.d)["alpha"]
        beta = self.beta if self.beta is not None else alpha / 2
        q_norm = strip_norm(Q, beta, self.sigma0)
        self.n_features_in_ = basis.size
        self.basis_ = basis
        self.N0_ = N0
        if eps0 == 0 or q_norm == 0:
            self.scale_ = 0.0
            self.schedule_ = None
            self.result_ = trivial_result(N0, omega)
        else:
            self.scale_ = eps0 / q_norm if self.normalize else 1.0
            self.schedule_ = make_schedule(eps0, self.sigma0, alpha, beta, self.m_max)
            options = KamOptions(K_box=self.K_box, kappa_cap=self.kappa_cap,
                                 enforce_smallness=self.enforce_smallness,
                                 grid_points=self.grid_points)
            self.result_ = kam_iterate(N0, Q * self.scale_, omega, self.schedule_, options)
        self.normal_form_ = self.result_.N_omega
        self.W_ = self.result_.W
        self.transformation_ = self.result_.M
        self.history_ = self.result_.history
        self.converged_ = self.result_.converged
        self.omega_ = omega
        return self

    def transform(self, X, t=0.0):
        """Reduced coordinates ``M^T(omega t) xi`` of states ``X`` at times ``t``."""
        check_is_fitted(self, "result_")
        X = check_state(X, self.n_features_in_)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        t = check_times(t)
        if len(t) == 1:
            t = np.full(len(X), t[0])
        out = self.result_.reduced_coordinates(X, t)
        return out[0] if single else out

    def predict(self, X, times):
        """Trajectory from the closed form ``conj(M(omega t)) e^{-itN^T} M(0)^T xi_0``."""
        check_is_fitted(self, "result_")
        xi0 = check_state(X, self.n_features_in_)
        return self.result_.closed_form(xi0, check_times(times))

    def quasi_energies(self, k_range=2):
        from .floquet import quasi_energies
        check_is_fitted(self, "result_")
        return quasi_energies(self.normal_form_, self.omega_, k_range)


class FrequencyScreener(BaseEstimator):
    """First Melnikov screen: ``predict`` marks frequency rows that pass."""

    def __init__(self, K=10, gamma=1e-3, W_max=21, d=1):
        self.K = K
        self.gamma = gamma
        self.W_max = W_max
        self.d = d

    def fit(self, X=None, y=None):
        check_positive(self.gamma, "gamma")
        self.basis_ = enumerate_modes(self.d, self.W_max)
        if X is not None:
            self.n_features_in_ = check_omega_grid(X).shape[1]
        return self

    def decision_function(self, X):
        """Worst normalised divisor minus ``gamma`` for each row."""
        check_is_fitted(self, "basis_")
        X = check_omega_grid(X, getattr(self, "n_features_in_", None))
        return np.array([first_melnikov_worst(om, self.K, self.basis_)[4] for om in X]) - self.gamma

    def predict(self, X):
        return self.decision_function(X) >= 0

    def transform(self, X):
        return self.decision_function(X)[:, None] + self.gamma
