import math
import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from tripspdc.device import gamma_total, reference_device
from tripspdc.fock import HilbertSpace
from tripspdc.steadystate import (PerturbativeRangeWarning, cavity_correlators, device_liouvillian,
                                  liouvillian, liouvillian_steady_state, pt_cavity_correlators,
                                  pt_coefficients, pt_density_matrix, top_level_population, unvec, vec)

SPACE4 = HilbertSpace((4, 4, 4))


def at_lambda(lam):
    m = reference_device(kerr=False)
    return m.with_g(lam * gamma_total(m))


def test_pt_reference_values():
    m = reference_device()
    c = pt_coefficients(m)
    assert math.isclose(c.beta, (0.06 / 3.032) ** 2, rel_tol=1e-12)
    pt = pt_cavity_correlators(m)
    assert math.isclose(pt.triple_abs, 1.979e-2, rel_tol=5e-4)
    assert math.isclose(pt.n[0], 1.858e-3, rel_tol=5e-4)
    assert math.isclose(pt.nn[0], 4.96e-4, rel_tol=5e-4)


def test_pt_populations_match_expanded_state():
    m = reference_device(kerr=False)
    s = HilbertSpace((3, 3, 3))
    pt = pt_cavity_correlators(m)
    rho = pt_density_matrix(m, s)
    c = cavity_correlators(rho)
    np.testing.assert_allclose(c.n, pt.n, rtol=1e-12)
    np.testing.assert_allclose(c.nn, pt.nn, rtol=1e-12)
    assert math.isclose(c.triple_abs, pt.triple_abs, rel_tol=1e-12)


def test_oracle_matches_closed_forms_at_small_lambda():
    lam = 0.01
    m = at_lambda(lam)
    ex = cavity_correlators(liouvillian_steady_state(m, SPACE4, kerr=False))
    pt = pt_cavity_correlators(m)
    # the second-order coefficient is about 58, well above 2
    assert abs(ex.triple_abs / pt.triple_abs - 1) < 60 * lam ** 2
    np.testing.assert_allclose(ex.n, pt.n, rtol=0.05)


def test_oracle_error_shrinks_quadratically():
    errs = []
    for lam in (0.005, 0.01):
        m = at_lambda(lam)
        ex = cavity_correlators(liouvillian_steady_state(m, SPACE4, kerr=False))
        pt = pt_cavity_correlators(m)
        errs.append([abs(ex.n[0] / pt.n[0] - 1), abs(ex.triple_abs / pt.triple_abs - 1)])
    errs = np.array(errs)
    assert np.all((3.0 < errs[1] / errs[0]) & (errs[1] / errs[0] < 5.0))


def test_steady_state_is_a_density_matrix():
    rho = liouvillian_steady_state(reference_device(g_mhz=0.1), SPACE4)
    assert math.isclose(rho.trace().real, 1.0, abs_tol=1e-12)
    assert rho.is_hermitian(1e-12)
    assert rho.min_eigenvalue() > -1e-12
    assert top_level_population(rho).max() < 1e-3


def test_steady_state_is_null_vector():
    m = reference_device(g_mhz=0.1)
    lv = device_liouvillian(m, SPACE4)
    rho = liouvillian_steady_state(m, SPACE4).data
    assert np.linalg.norm(lv @ vec(rho)) < 1e-10 * sp.linalg.norm(lv)


def test_zero_drive_gives_vacuum():
    rho = liouvillian_steady_state(reference_device().with_g(0.0), HilbertSpace((2, 2, 2)))
    assert math.isclose(rho.element((0, 0, 0), (0, 0, 0)).real, 1.0, abs_tol=1e-12)


def test_lambda_range_guards():
    with pytest.warns(PerturbativeRangeWarning):
        pt_cavity_correlators(at_lambda(0.2))
    with pytest.raises(ValueError):
        pt_cavity_correlators(at_lambda(0.6))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pt_cavity_correlators(at_lambda(0.05))


def test_vec_roundtrip():
    x = np.arange(9.0).reshape(3, 3) + 1j
    np.testing.assert_array_equal(unvec(vec(x), 3), x)


@st.composite
def open_system(draw):
    d = draw(st.integers(2, 4))
    seed = draw(st.integers(0, 2 ** 31))
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    cs = [rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)) for _ in range(draw(st.integers(0, 2)))]
    return a + a.conj().T, cs, d


@given(open_system())
@settings(max_examples=40, deadline=None)
def test_liouvillian_preserves_trace_and_hermiticity(system):
    h, cs, d = system
    lv = liouvillian(sp.csr_matrix(h), [sp.csr_matrix(c) for c in cs], d)
    trace_row = vec(np.eye(d))
    assert abs(trace_row @ lv.toarray()).max() < 1e-10
    rng = np.random.default_rng(0)
    x = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    x = x + x.conj().T
    y = unvec(lv @ vec(x), d)
    np.testing.assert_allclose(y, y.conj().T, atol=1e-10)
