"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .blockmat import BlockMatrix
from .potential import QuasiPeriodicMatrix


def check_omega(omega, n=None):
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if omega.ndim != 1 or not np.all(np.isfinite(omega)):
        raise ValueError("omega must be a finite 1-d vector")
    if n is not None and len(omega) != n:
        raise ValueError(f"omega must have {n} components, got {len(omega)}")
    return omega


def check_omega_grid(X, n=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    X = check_array(X, dtype=float)
    if n is not None and X.shape[1] != n:
        raise ValueError(f"frequency rows must have {n} components")
    return X


def check_positive(value, name, allow_zero=False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'>= 0' if allow_zero else '> 0'}")
    return float(value)


def check_unit_interval(value, name):
    value = check_positive(value, name)
    if value >= 1:
        raise ValueError(f"{name} must be < 1")
    return value


def check_quasi_periodic(Q):
    if not isinstance(Q, QuasiPeriodicMatrix):
        raise TypeError("expected a QuasiPeriodicMatrix")
    if Q.hermitian_symmetry_defect() > 1e-12 * max(1.0, Q.max_abs()):
        raise ValueError("Q(phi) is not Hermitian for real phi")
    return Q


def check_normal_form(N, basis=None):
    if not isinstance(N, BlockMatrix):
        raise TypeError("expected a BlockMatrix")
    if basis is not None and N.basis != basis:
        raise ValueError("normal form lives on a different truncation")
    return N


def check_state(xi, size):
    """Coerce ``xi`` to a complex array whose last axis has length ``size``."""
    xi = np.asarray(xi, dtype=complex)
    if xi.shape[-1] != size:
        raise ValueError(f"state vectors must have {size} components")
    if not np.all(np.isfinite(xi)):
        raise ValueError("state vectors must be finite")
    return xi


def check_times(times):
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.ndim != 1 or not np.all(np.isfinite(times)):
        raise ValueError("times must be a finite 1-d array")
    return times
