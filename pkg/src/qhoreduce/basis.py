"""Truncated Hermite basis of the d-dimensional harmonic oscillator.

Modes are grouped in clusters of equal eigenvalue ``w``.  A mode carries the
odd 1-d levels ``(i_1, ..., i_d)`` with ``sum(i_k) = w``; level ``i`` is the
1-d Hermite function of index ``(i - 1) // 2``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.special import roots_hermite

from .exceptions import EmptyBasisError

logger = logging.getLogger(__name__)

_PI_QUARTER = math.pi ** -0.25
_RESCALE = 2.0 ** 200


@dataclass(frozen=True, order=True)
class ModeIndex:
    j: int
    l: int
    multi_index: tuple

    @property
    def hermite_indices(self):
        return tuple((i - 1) // 2 for i in self.multi_index)


@dataclass(frozen=True)
class Cluster:
    w: int
    modes: tuple

    @property
    def size(self):
        return len(self.modes)


@dataclass(frozen=True)
class BasisTruncation:
    """Ordered clusters of a truncated Hermite basis.

    Mode ordering is cluster-major, lexicographic inside a cluster.
    """

    d: int
    W_max: int
    clusters: tuple

    @property
    def n_clusters(self):
        return len(self.clusters)

    @cached_property
    def modes(self):
        return tuple(m for c in self.clusters for m in c.modes)

    @property
    def size(self):
        return len(self.modes)

    @cached_property
    def cluster_weights(self):
        return np.array([c.w for c in self.clusters], dtype=float)

    @cached_property
    def cluster_sizes(self):
        return np.array([c.size for c in self.clusters], dtype=int)

    @cached_property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.cluster_sizes)])

    @cached_property
    def slices(self):
        o = self.offsets
        return tuple(slice(int(o[i]), int(o[i + 1])) for i in range(self.n_clusters))

    @cached_property
    def weights(self):
        """Per-mode eigenvalue ``w_a``."""
        return np.repeat(self.cluster_weights, self.cluster_sizes)

    @cached_property
    def mode_cluster(self):
        """Cluster position of every mode."""
        return np.repeat(np.arange(self.n_clusters), self.cluster_sizes)

    @cached_property
    def hermite_table(self):
        return np.array([m.hermite_indices for m in self.modes], dtype=int)

    def key(self):
        return (self.d, self.W_max)

    def __eq__(self, other):
        return isinstance(other, BasisTruncation) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


def _odd_compositions(w, d):
    if d == 1:
        return [(w,)] if w % 2 == 1 and w >= 1 else []
    out = []
    for first in range(1, w - (d - 1) + 1, 2):
        for rest in _odd_compositions(w - first, d - 1):
            out.append((first,) + rest)
    return out


@lru_cache(maxsize=64)
def enumerate_modes(d, W_max):
    """Enumerate all clusters with eigenvalue ``d <= w <= W_max``.

    A cutoff with the wrong parity is rounded down to the nearest level.
    """
    d = int(d)
    if d < 1:
        raise ValueError("dimension must be >= 1")
    W = int(math.floor(W_max))
    if W < d:
        raise EmptyBasisError(f"W_max={W_max} < d={d}: no eigenvalue level retained")
    if (W - d) % 2:
        logger.info("W_max=%s has wrong parity for d=%d, using %d", W_max, d, W - 1)
        W -= 1
    clusters = []
    for w in range(d, W + 1, 2):
        comps = sorted(_odd_compositions(w, d))
        modes = tuple(ModeIndex(w, l + 1, c) for l, c in enumerate(comps))
        clusters.append(Cluster(w, modes))
    return BasisTruncation(d, W, tuple(clusters))


def hermite_functions(n_max, x):
    """All L2-normalised Hermite functions ``psi_0 .. psi_{n_max}`` at ``x``.

    Returns an array of shape ``(n_max + 1,) + x.shape``.  The three-term
    recurrence runs on mantissas with a separate base-2 exponent, so large
    indices and arguments neither overflow nor lose the Gaussian factor.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty((n_max + 1,) + x.shape)
    expo = -0.5 * x * x / math.log(2.0)
    p_prev = np.zeros_like(x)
    p_cur = np.full_like(x, _PI_QUARTER)
    out[0] = p_cur * np.exp2(expo)
    for n in range(n_max):
        p_next = math.sqrt(2.0 / (n + 1)) * x * p_cur - math.sqrt(n / (n + 1)) * p_prev
        p_prev, p_cur = p_cur, p_next
        big = np.abs(p_cur) > _RESCALE
        if np.any(big):
            _, e = np.frexp(np.where(big, p_cur, 1.0))
            e = np.where(big, e, 0)
            p_cur = np.ldexp(p_cur, -e)
            p_prev = np.ldexp(p_prev, -e)
            expo = expo + e
        out[n + 1] = p_cur * np.exp2(expo)
    return out


def hermite_eval(i, x):
    """L2-normalised Hermite function of index ``i`` (eigenvalue ``2i + 1``)."""
    if i < 0:
        raise ValueError("Hermite index must be >= 0")
    return hermite_functions(int(i), x)[-1]


def phi_eval(mode, x):
    """Tensor-product basis function of ``mode`` at points ``x``.

    ``x`` has shape ``(d,)`` or ``(npts, d)``.
    """
    x = np.asarray(x, dtype=float)
    d = len(mode.multi_index)
    if x.shape[-1] != d:
        raise ValueError(f"mode has dimension {d}, points have {x.shape[-1]}")
    val = np.ones(x.shape[:-1])
    for axis, i in enumerate(mode.hermite_indices):
        val = val * hermite_eval(i, x[..., axis])
    return val


@lru_cache(maxsize=32)
def gauss_hermite(n_nodes):
    """Nodes and weights for ``int f(x) dx`` with ``f`` Gaussian-decaying.

    Weights already include the ``exp(x**2)`` factor.  They are obtained
    from the Christoffel identity ``1 / sum_n psi_n(x_i)**2`` so they do not
    underflow at the outer nodes.
    """
    nodes, _ = roots_hermite(int(n_nodes))
    psi = hermite_functions(int(n_nodes) - 1, nodes)
    weights = 1.0 / np.sum(psi * psi, axis=0)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def basis_on_nodes(basis, nodes_1d):
    """Values of every retained basis function on a tensor grid.

    Returns ``(values, points)`` with ``values`` of shape ``(n_modes, n_points)``
    and ``points`` of shape ``(n_points, d)``; grid order is C-order over axes.
    """
    nodes_1d = np.asarray(nodes_1d, dtype=float)
    table = basis.hermite_table
    psi = hermite_functions(int(table.max()), nodes_1d)
    d = basis.d
    vals = np.ones((basis.size,) + (len(nodes_1d),) * d)
    for axis in range(d):
        shape = [1] * d
        shape[axis] = len(nodes_1d)
        vals = vals * psi[table[:, axis]].reshape((basis.size,) + tuple(shape))
    grids = np.meshgrid(*([nodes_1d] * d), indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=-1)
    return vals.reshape(basis.size, -1), points
