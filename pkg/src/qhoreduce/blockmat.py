"""Cluster-block matrices with logarithmic decay norms.

A :class:`BlockMatrix` stores a dense complex matrix on a
:class:`~qhoreduce.basis.BasisTruncation`; blocks are views indexed by
cluster position.  On a truncation every supremum is a maximum over the
retained cluster pairs.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .basis import BasisTruncation, enumerate_modes
from .exceptions import BasisMismatchError, NotHermitianError

HERMITIAN_TOL = 1e-12
_MAGIC = b"QHBM"


def log_weights(basis, beta):
    """``(1 + ln w)**beta`` per cluster."""
    return (1.0 + np.log(basis.cluster_weights)) ** beta


def distance_weights(basis):
    """``1 + |w_a - w_b|`` per cluster pair."""
    w = basis.cluster_weights
    return 1.0 + np.abs(w[:, None] - w[None, :])


def block_norms(basis, data):
    """Spectral norms of every cluster block.

    ``data`` may carry leading batch axes: shape ``(..., n, n)`` maps to
    ``(..., n_clusters, n_clusters)``.
    """
    data = np.asarray(data)
    if np.all(basis.cluster_sizes == 1):
        return np.abs(data)
    nc = basis.n_clusters
    out = np.empty(data.shape[:-2] + (nc, nc))
    for ia, sa in enumerate(basis.slices):
        for ib, sb in enumerate(basis.slices):
            blk = data[..., sa, sb]
            if blk.shape[-1] == 1 or blk.shape[-2] == 1:
                out[..., ia, ib] = np.sqrt(np.sum(np.abs(blk) ** 2, axis=(-2, -1)))
            else:
                out[..., ia, ib] = np.linalg.norm(blk, ord=2, axis=(-2, -1))
    return out


def weighted_block_norms(basis, data, beta, plus=False):
    lw = log_weights(basis, beta)
    wts = lw[:, None] * lw[None, :]
    if plus:
        wts = wts * distance_weights(basis)
    return block_norms(basis, data) * wts


@dataclass(frozen=True)
class DecayNormReport:
    beta: float
    norm: float
    norm_plus: float
    argmax_pair: tuple
    W_max: int


@dataclass
class SequenceVector:
    """Per-mode complex coefficients on a truncation."""

    basis: BasisTruncation
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape[-1] != self.basis.size:
            raise ValueError("vector length does not match the basis")

    def norm(self, s=0.0):
        return sobolev_norm(self.basis, self.values, s)


def sobolev_norm(basis, values, s):
    """``(sum_a w_a**s |xi_a|**2) ** 0.5`` along the last axis."""
    w = basis.weights ** s
    return np.sqrt(np.sum(w * np.abs(values) ** 2, axis=-1))


class BlockMatrix:
    """Complex matrix over cluster-by-cluster blocks of a truncation."""

    __slots__ = ("basis", "data")

    def __init__(self, basis, data):
        data = np.array(data, dtype=complex)
        if data.shape != (basis.size, basis.size):
            raise ValueError(f"expected shape {(basis.size, basis.size)}, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("non-finite entries")
        data.setflags(write=False)
        self.basis = basis
        self.data = data

    @classmethod
    def zeros(cls, basis):
        return cls(basis, np.zeros((basis.size, basis.size)))

    @classmethod
    def identity(cls, basis):
        return cls(basis, np.eye(basis.size))

    @classmethod
    def diagonal(cls, basis, values=None):
        """Diagonal matrix; defaults to ``N_0 = diag(w_a)``."""
        values = basis.weights if values is None else values
        return cls(basis, np.diag(values))

    @classmethod
    def from_blocks(cls, basis, blocks):
        data = np.zeros((basis.size, basis.size), dtype=complex)
        for (a, b), blk in blocks.items():
            data[basis.slices[a], basis.slices[b]] = blk
        return cls(basis, data)

    def block(self, a, b):
        return self.data[self.basis.slices[a], self.basis.slices[b]]

    def nonzero_blocks(self, tol=0.0):
        """Yield ``((a, b), block)`` for blocks with a nonzero entry."""
        for ia, sa in enumerate(self.basis.slices):
            for ib, sb in enumerate(self.basis.slices):
                blk = self.data[sa, sb]
                if np.max(np.abs(blk)) > tol:
                    yield (ia, ib), blk

    def _check(self, other):
        if not isinstance(other, BlockMatrix):
            return NotImplemented
        if other.basis != self.basis:
            raise BasisMismatchError("block matrices live on different truncations")
        return None

    def __add__(self, other):
        self._check(other)
        return BlockMatrix(self.basis, self.data + other.data)

    def __sub__(self, other):
        self._check(other)
        return BlockMatrix(self.basis, self.data - other.data)

    def __neg__(self):
        return BlockMatrix(self.basis, -self.data)

    def __mul__(self, scalar):
        return BlockMatrix(self.basis, scalar * self.data)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return block_mul(self, other)

    @property
    def H(self):
        return BlockMatrix(self.basis, self.data.conj().T)

    @property
    def T(self):
        return BlockMatrix(self.basis, self.data.T)

    def hermitian_defect(self):
        return float(np.max(np.abs(self.data - self.data.conj().T), initial=0.0))

    def is_hermitian(self, tol=HERMITIAN_TOL):
        return self.hermitian_defect() <= tol

    def allclose(self, other, atol=1e-12):
        self._check(other)
        return bool(np.allclose(self.data, other.data, rtol=0.0, atol=atol))

    def __repr__(self):
        return f"BlockMatrix(d={self.basis.d}, W_max={self.basis.W_max}, size={self.basis.size})"

    # serialisation -------------------------------------------------------
    def to_dict(self):
        blocks = []
        for (a, b), blk in self.nonzero_blocks():
            blocks.append({"a": a, "b": b, "re": blk.real.tolist(), "im": blk.imag.tolist()})
        return {
            "d": self.basis.d,
            "W_max": self.basis.W_max,
            "clusters": [int(w) for w in self.basis.cluster_weights],
            "blocks": blocks,
        }

    @classmethod
    def from_dict(cls, payload, basis=None):
        basis = basis or enumerate_modes(payload["d"], payload["W_max"])
        blocks = {
            (int(b["a"]), int(b["b"])): np.array(b["re"]) + 1j * np.array(b["im"])
            for b in payload["blocks"]
        }
        return cls.from_blocks(basis, blocks)

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_bytes(self):
        """Binary layout, all little-endian.

        ``b"QHBM"``, int64 ``d, W_max, n_blocks``, then per block int64
        ``a, b`` followed by the real and imaginary parts as float64 in
        C order.  Zero blocks are not written.
        """
        blocks = list(self.nonzero_blocks())
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<qqq", self.basis.d, self.basis.W_max, len(blocks)))
        for (a, b), blk in blocks:
            buf.write(struct.pack("<qq", a, b))
            buf.write(np.ascontiguousarray(blk.real, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(blk.imag, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw):
        if raw[:4] != _MAGIC:
            raise ValueError("not a block-matrix stream")
        d, W_max, nblocks = struct.unpack_from("<qqq", raw, 4)
        basis = enumerate_modes(d, W_max)
        pos = 4 + 24
        blocks = {}
        for _ in range(nblocks):
            a, b = struct.unpack_from("<qq", raw, pos)
            pos += 16
            shape = (int(basis.cluster_sizes[a]), int(basis.cluster_sizes[b]))
            cnt = shape[0] * shape[1]
            re = np.frombuffer(raw, dtype="<f8", count=cnt, offset=pos).reshape(shape)
            pos += 8 * cnt
            im = np.frombuffer(raw, dtype="<f8", count=cnt, offset=pos).reshape(shape)
            pos += 8 * cnt
            blocks[(a, b)] = re + 1j * im
        return cls.from_blocks(basis, blocks)


def decay_norm(A, beta):
    """``|A|_beta`` and ``|A|_{beta+}`` with the maximising cluster pair."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    wn = weighted_block_norms(A.basis, A.data, beta)
    idx = np.unravel_index(int(np.argmax(wn)), wn.shape)
    plus = float(np.max(wn * distance_weights(A.basis)))
    return DecayNormReport(
        beta=float(beta),
        norm=float(wn[idx]),
        norm_plus=plus,
        argmax_pair=(int(idx[0]), int(idx[1])),
        W_max=A.basis.W_max,
    )


def decay_norm_plus(A, beta):
    return decay_norm(A, beta).norm_plus


def block_mul(A, B):
    if A.basis != B.basis:
        raise BasisMismatchError("block matrices live on different truncations")
    return BlockMatrix(A.basis, A.data @ B.data)


def commutator(Q1, Q2):
    if Q1.basis != Q2.basis:
        raise BasisMismatchError("block matrices live on different truncations")
    return BlockMatrix(Q1.basis, Q1.data @ Q2.data - Q2.data @ Q1.data)


def block_exp(R, scale=1.0):
    """``exp(scale * R)`` by Pade scaling-and-squaring."""
    if not np.all(np.isfinite(R.data)):
        raise ValueError("non-finite entries")
    return BlockMatrix(R.basis, scipy.linalg.expm(scale * R.data))


def hermitian_exp(S, scale=1j):
    """``exp(scale * S)`` for Hermitian ``S`` through its eigenbasis.

    Used where unitarity of ``exp(iS)`` has to hold to roundoff.
    """
    data = S.data if isinstance(S, BlockMatrix) else np.asarray(S)
    if np.max(np.abs(data - data.conj().T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(data), initial=0.0)):
        raise NotHermitianError("hermitian_exp needs a Hermitian argument")
    lam, V = np.linalg.eigh(0.5 * (data + data.conj().T))
    out = (V * np.exp(scale * lam)) @ V.conj().T
    return BlockMatrix(S.basis, out) if isinstance(S, BlockMatrix) else out


def is_normal_form(Q, tol):
    """Block diagonal and Hermitian, both within ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    norms = block_norms(Q.basis, Q.data)
    off = norms.copy()
    np.fill_diagonal(off, 0.0)
    return bool(np.max(off, initial=0.0) <= tol and Q.hermitian_defect() <= tol)


def block_diagonal_part(Q):
    data = np.zeros_like(Q.data)
    for s in Q.basis.slices:
        data[s, s] = Q.data[s, s]
    return BlockMatrix(Q.basis, data)


def apply(A, xi):
    """Matrix-vector product on a :class:`SequenceVector`."""
    if isinstance(xi, SequenceVector):
        if xi.basis != A.basis:
            raise BasisMismatchError("vector and matrix live on different truncations")
        values = xi.values
    else:
        values = np.asarray(xi, dtype=complex)
    if values.shape[-1] != A.basis.size:
        raise ValueError("vector length does not match the basis")
    return SequenceVector(A.basis, values @ A.data.T)


def operator_norm_weighted(basis, data, s_in, s_out=None):
    """Norm of ``data`` as a map from ``l2_{s_in}`` to ``l2_{s_out}``."""
    s_out = s_in if s_out is None else s_out
    w = basis.weights
    scaled = (w ** (s_out / 2))[:, None] * data * (w ** (-s_in / 2))[None, :]
    return float(np.linalg.norm(scaled, 2))


# -- structural constants ---------------------------------------------------

def auxiliary_series(delta, j, l_max):
    """Partial sum ``sum_{l=1}^{l_max} 1 / ((1 + ln l)**delta (1 + |l - j|))``."""
    if delta <= 1:
        raise ValueError("delta must exceed 1 for the sum to stay bounded in j")
    if j < 1:
        raise ValueError("j must be >= 1")
    total = 0.0
    chunk = 1 << 20
    for start in range(1, int(l_max) + 1, chunk):
        l = np.arange(start, min(start + chunk, int(l_max) + 1), dtype=float)
        total += float(np.sum(1.0 / ((1.0 + np.log(l)) ** delta * (1.0 + np.abs(l - j)))))
    return total


def cluster_series(basis, beta):
    """``max_b sum_c 1 / ((1 + ln w_c)**(2 beta) (1 + |w_b - w_c|))`` on the truncation."""
    lw = log_weights(basis, 2 * beta)
    terms = 1.0 / (lw[None, :] * distance_weights(basis))
    return float(np.max(np.sum(terms, axis=1)))


def structure_constants(basis, beta):
    """Constants for which the product, exponential and action bounds hold.

    Each value follows the summation argument of the corresponding bound with
    the series evaluated over the retained clusters, so on this truncation
    the inequalities are exact rather than fitted.
    """
    w = basis.cluster_weights
    lw2 = log_weights(basis, 2 * beta)
    dist = distance_weights(basis)
    series = cluster_series(basis, beta)
    c_prod = series
    c_prod_plus = 2.0 * series
    c_dual = float(np.sum(1.0 / (lw2 * w)))
    lw = log_weights(basis, beta)
    c_action = 0.0
    for s in (-1.0, 0.0, 1.0):
        kernel = (w[:, None] / w[None, :]) ** (s / 2) / (lw[:, None] * lw[None, :] * dist)
        c_action = max(c_action, float(np.linalg.norm(kernel, 2)))
    return {
        "product": c_prod,
        "product_plus": c_prod_plus,
        "exp": c_prod_plus,
        "dual": c_dual,
        "action": c_action,
    }
