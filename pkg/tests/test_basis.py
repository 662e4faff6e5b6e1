import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import eval_hermite, factorial

from qhoreduce.basis import (basis_on_nodes, enumerate_modes, gauss_hermite, hermite_eval,
                             hermite_functions, phi_eval)
from qhoreduce.exceptions import EmptyBasisError


def brute_force_modes(d, W):
    out = []
    for combo in itertools.product(range(1, W + 1, 2), repeat=d):
        if sum(combo) <= W:
            out.append(combo)
    return out


def test_one_dimensional_levels_are_simple():
    b = enumerate_modes(1, 7)
    assert [c.w for c in b.clusters] == [1, 3, 5, 7]
    assert all(c.size == 1 for c in b.clusters)


def test_two_dimensional_small_clusters():
    b = enumerate_modes(2, 4)
    assert [c.w for c in b.clusters] == [2, 4]
    assert [m.multi_index for m in b.clusters[0].modes] == [(1, 1)]
    assert [m.multi_index for m in b.clusters[1].modes] == [(1, 3), (3, 1)]


@pytest.mark.parametrize("d,W", [(1, 41), (2, 30), (3, 21)])
def test_cluster_completeness_and_size_bound(d, W):
    b = enumerate_modes(d, W)
    assert b.size == len(brute_force_modes(d, W))
    for c in b.clusters:
        assert c.size <= c.w ** (d - 1)
        assert list(c.modes) == sorted(c.modes)
        assert all(sum(m.multi_index) == c.w for m in c.modes)
        assert [m.l for m in c.modes] == list(range(1, c.size + 1))


def test_parity_rounding_and_empty():
    assert enumerate_modes(1, 8).W_max == 7
    assert enumerate_modes(2, 5).W_max == 4
    with pytest.raises(EmptyBasisError):
        enumerate_modes(2, 1)


def test_deterministic_ordering():
    enumerate_modes.cache_clear()
    a = enumerate_modes(2, 12).modes
    enumerate_modes.cache_clear()
    assert enumerate_modes(2, 12).modes == a


def test_hermite_trivial_values():
    assert hermite_eval(0, 0.0) == pytest.approx(math.pi ** -0.25, rel=1e-15)
    assert hermite_eval(1, 0.0) == 0.0
    with pytest.raises(ValueError):
        hermite_eval(-1, 0.0)


def test_hermite_matches_physicists_polynomials():
    x = np.linspace(-4, 4, 41)
    for n in range(0, 30):
        ref = eval_hermite(n, x) * np.exp(-x * x / 2) / math.sqrt(2.0 ** n * factorial(n) * math.sqrt(math.pi))
        assert np.allclose(hermite_eval(n, x), ref, atol=1e-12, rtol=1e-10)


def test_hermite_normalisation_to_index_200():
    x, w = gauss_hermite(260)
    psi = hermite_functions(200, x)
    norms = psi ** 2 @ w
    assert np.max(np.abs(norms - 1)) < 1e-10


def test_hermite_no_overflow_far_out():
    psi = hermite_functions(600, np.array([0.0, 10.0, 40.0, 60.0]))
    assert np.all(np.isfinite(psi))
    assert abs(psi[-1, 3]) < 1e-100


def test_phi_eval_one_dimension_matches_hermite():
    b = enumerate_modes(1, 11)
    x = np.linspace(-3, 3, 7)[:, None]
    for m in b.modes:
        assert np.allclose(phi_eval(m, x), hermite_eval(m.hermite_indices[0], x[:, 0]))


def test_phi_eval_two_dimensional_odd_factor():
    b = enumerate_modes(2, 6)
    mode = next(m for m in b.modes if m.multi_index == (3, 3))
    assert phi_eval(mode, np.zeros(2)) == 0.0
    ground = b.modes[0]
    assert phi_eval(ground, np.zeros(2)) == pytest.approx(math.pi ** -0.5)
    with pytest.raises(ValueError):
        phi_eval(ground, np.zeros(3))


@pytest.mark.parametrize("d,W", [(1, 60), (2, 30)])
def test_gram_matrix_is_identity(d, W):
    b = enumerate_modes(d, W)
    x, w = gauss_hermite(W + 10)
    vals, pts = basis_on_nodes(b, x)
    weights = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), -1).reshape(-1, d), axis=1)
    gram = (vals * weights) @ vals.T
    assert np.max(np.abs(gram - np.eye(b.size))) < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(0, 16))
def test_mode_count_property(d, extra):
    W = d + extra
    b = enumerate_modes(d, W)
    assert b.size == len(brute_force_modes(d, b.W_max))
    assert np.all(np.diff(b.cluster_weights) == 2)
