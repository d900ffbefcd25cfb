import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripspdc.device import (CHARACTERIZED_GAMMA_TOT, REFERENCE_CONFIG_TEXT, ConfigError, ModeParams,
                             RateConvention, build_hamiltonian, collapse_operators, gamma_total,
                             kerr_khz_to_angular, load_config, reference_device)
from tripspdc.fock import HilbertSpace


def test_symmetrized_cross_kerr():
    m = reference_device()
    assert math.isclose(m.kerr_sym[0, 1], kerr_khz_to_angular(57.75), rel_tol=1e-12)
    assert np.allclose(m.kerr_sym, m.kerr_sym.T)


def test_mode_one_total_rate():
    m = reference_device()
    assert math.isclose(m.modes[0].gamma / (2 * math.pi), 0.639, rel_tol=1e-12)
    assert round(m.modes[0].gamma, 3) == 4.015


def test_gamma_total_cyclic_and_angular():
    m = reference_device()
    assert round(gamma_total(m) / (2 * math.pi), 3) == 3.032
    assert round(sum(CHARACTERIZED_GAMMA_TOT), 2) == 19.05


@given(st.floats(1e-3, 1e3))
def test_rate_convention_roundtrip(x):
    c = RateConvention.CYCLIC_MHZ
    assert math.isclose(c.from_angular(c.to_angular(x)), x, rel_tol=1e-14)
    assert RateConvention.ANGULAR_RAD_PER_US.to_angular(x) == x


def test_mode_validation():
    with pytest.raises(ValueError):
        ModeParams(5.0, 0.0)
    with pytest.raises(ValueError):
        ModeParams(5.0, 1.0, -0.1)


def test_hamiltonian_hermitian_and_drive_element():
    m = reference_device()
    s = HilbertSpace((4, 4, 4))
    h = build_hamiltonian(m, s).data
    assert abs(h - h.conj().T).max() < 1e-14
    assert math.isclose(h[s.index((0, 0, 0)), s.index((1, 1, 1))].real, m.g, rel_tol=1e-12)
    # the triple drive only connects states differing by one photon in every mode
    assert h[s.index((0, 0, 0)), s.index((1, 1, 0))] == 0


def test_kerr_energy_of_fock_state():
    m = reference_device().with_g(0.0)
    s = HilbertSpace((3, 3, 3))
    h = build_hamiltonian(m, s).data
    k = m.kerr_sym
    # a^+a^+aa on |1,1,0> picks up only the cross terms (1,2) and (2,1)
    e = h[s.index((1, 1, 0)), s.index((1, 1, 0))].real
    assert math.isclose(e, -2 * k[0, 1], rel_tol=1e-12)
    # and the self term n(n-1) on |2,0,0>
    e2 = h[s.index((2, 0, 0)), s.index((2, 0, 0))].real
    assert math.isclose(e2, -2 * k[0, 0], rel_tol=1e-12)


@given(st.permutations([0, 1, 2]))
@settings(max_examples=6, deadline=None)
def test_permuting_modes_permutes_spectrum(order):
    m = reference_device()
    s = HilbertSpace((3, 3, 3))
    e1 = np.linalg.eigvalsh(build_hamiltonian(m, s).dense())
    e2 = np.linalg.eigvalsh(build_hamiltonian(m.permuted(order), s).dense())
    np.testing.assert_allclose(e1, e2, atol=1e-12)


def test_collapse_operator_rates():
    m = reference_device()
    s = HilbertSpace((2, 2, 2))
    ops = collapse_operators(m, s)
    assert len(ops) == 6
    total = sum((c.dag() @ c).dense() for c in ops)
    e = s.index((1, 0, 0))
    assert math.isclose(total[e, e].real, m.modes[0].gamma, rel_tol=1e-12)


def test_config_roundtrip(tmp_path):
    p = tmp_path / "dev.ini"
    p.write_text(REFERENCE_CONFIG_TEXT)
    model, dims, _ = load_config(p)
    ref = reference_device()
    assert dims == (4, 4, 4)
    np.testing.assert_allclose(model.gammas, ref.gammas)
    np.testing.assert_allclose(model.kerr, ref.kerr)
    assert math.isclose(model.g, ref.g)


@pytest.mark.parametrize("bad", [
    REFERENCE_CONFIG_TEXT.replace("[mode3]", "[modeX]"),
    REFERENCE_CONFIG_TEXT.replace("136.0", ""),
    REFERENCE_CONFIG_TEXT.replace("dims = 4 4 4", "dims = 4 1 4"),
    REFERENCE_CONFIG_TEXT.replace("gamma_ext = 0.604", "gamma_ext = fast"),
])
def test_config_errors(tmp_path, bad):
    p = tmp_path / "bad.ini"
    p.write_text(bad)
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")
