import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qhoreduce import FrequencyScreener, KAMReducer
from qhoreduce.basis import enumerate_modes
from qhoreduce.floquet import conjugacy_error, integrate_direct
from qhoreduce.potential import PotentialSpec, assemble_Q

OMEGA = math.sqrt(5) - 1


@pytest.fixture(scope="module")
def Q():
    return assemble_Q(PotentialSpec(iota=1.5), enumerate_modes(1, 21))


def test_params_roundtrip():
    est = KAMReducer(omega=[OMEGA], eps0=1e-5, m_max=4)
    params = est.get_params()
    assert params["eps0"] == 1e-5 and params["m_max"] == 4
    twin = clone(est).set_params(m_max=3)
    assert twin.m_max == 3 and est.m_max == 4


def test_unfitted_raises(Q):
    with pytest.raises(NotFittedError):
        KAMReducer(omega=[OMEGA]).predict(np.ones(Q.basis.size), [0.0])


def test_fit_normalizes_and_converges(Q):
    est = KAMReducer(omega=[OMEGA], eps0=1e-4, m_max=4, enforce_smallness=False).fit(Q)
    assert est.converged_
    assert est.normal_form_.basis == Q.basis
    assert est.W_.hermitian_defect() < 1e-14
    assert est.quasi_energies(1).shape == (3 * Q.basis.size,)
    xi0 = np.zeros(Q.basis.size, complex)
    xi0[0] = 1
    tr = integrate_direct(est.N0_, Q, est.scale_, OMEGA, xi0, 10.0, sample_every=50)
    assert conjugacy_error(est.result_, tr) < 1e-9
    pred = est.predict(xi0, tr.times)
    assert np.max(np.abs(pred - tr.xi)) < 1e-9
    y = est.transform(np.vstack([xi0, xi0]), t=0.0)
    assert np.allclose(np.linalg.norm(y, axis=1), 1)


def test_zero_eps_is_identity(Q):
    est = KAMReducer(omega=[OMEGA], eps0=0.0).fit(Q)
    assert est.scale_ == 0 and est.converged_
    x = np.arange(Q.basis.size, dtype=complex)
    assert np.allclose(est.transform(x, t=3.0), x)
    assert np.allclose(est.normal_form_.data, np.diag(np.diag(est.N0_.data)))


@pytest.mark.parametrize("kw, exc", [({"omega": [OMEGA, 1.0]}, ValueError), ({"eps0": -1}, ValueError),
                                     ({"omega": [np.nan]}, ValueError)])
def test_bad_parameters(Q, kw, exc):
    params = {"omega": [OMEGA], **kw}
    with pytest.raises(exc):
        KAMReducer(**params).fit(Q)


def test_rejects_wrong_inputs(Q):
    with pytest.raises(TypeError):
        KAMReducer(omega=[OMEGA]).fit(np.eye(3))
    est = KAMReducer(omega=[OMEGA], eps0=0.0).fit(Q)
    with pytest.raises(ValueError):
        est.transform(np.ones(Q.basis.size + 1))


def test_screener_separates_resonant_frequencies():
    scr = FrequencyScreener(K=10, gamma=1e-3, W_max=11).fit(np.zeros((1, 1)))
    flags = scr.predict(np.array([[OMEGA], [1.0], [2.0]]))
    assert flags.tolist() == [True, False, False]
    worst = scr.transform(np.array([[OMEGA]]))
    assert worst.shape == (1, 1) and worst[0, 0] > 1e-3
    with pytest.raises(ValueError):
        scr.predict(np.ones((2, 2)))
