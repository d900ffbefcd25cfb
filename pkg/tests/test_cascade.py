import numpy as np
import pytest

from tripspdc.cascade import (TruncationError, build_cascade_generators, gv_from_wavepacket,
                              make_system, master_equation_moments, run_trajectories,
                              single_photon_overlap)
from tripspdc.device import reference_device
from tripspdc.pulses import make_mode


@pytest.fixture(scope="module")
def strong():
    m = reference_device(g_mhz=0.3, kerr=False)
    sys = make_system(m, make_mode("boxcar", 0.5, 0.005), dims=(3, 3, 3),
                      virtual_dims=(2, 2, 2), warmup=0)
    return sys, master_equation_moments(sys, initial="steady")


def test_gv_boxcar():
    T = 2.0
    cpl = gv_from_wavepacket(make_mode("boxcar", T, 0.01))
    t = np.array([0.1, 0.5, 1.0, 1.9])
    np.testing.assert_allclose(cpl(t), -1 / np.sqrt(t), rtol=1e-6)
    assert cpl.cumulative(T) == pytest.approx(1.0, abs=1e-6)
    assert cpl(T + 0.1) == 0.0
    # regularized at the leading edge instead of diverging
    assert np.isfinite(cpl(0.0))


def test_gv_gaussian_normalized():
    cpl = gv_from_wavepacket(make_mode("gaussian", 1.0, 0.005))
    assert cpl.cumulative(cpl.support[1]) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("shape,width,expected", [("boxcar", 2.0, 0.4540144),
                                                  ("gaussian", 0.8, 0.03104956)])
def test_single_photon_capture(shape, width, expected):
    m = reference_device(kerr=False).with_g(0.0)
    f = make_mode(shape, width, 0.005)
    sys = make_system(m, f, dims=(2, 2, 2), dt=0.0025, warmup=0)
    init = sys.physical_space.basis((1, 0, 0))
    overlap = single_photon_overlap(sys.wavepackets[0], m.gammas[0], m.gamma_ext[0])
    assert overlap == pytest.approx(expected, rel=1e-5)
    me = master_equation_moments(sys, initial=init)
    assert me.moments.n[0] == pytest.approx(overlap, rel=2e-3)
    assert me.moments.n[1] == pytest.approx(0.0, abs=1e-12)
    tr = run_trajectories(sys, 400, seed=1, initial=init, top_level_max=1.0)
    assert abs(tr.moments.n[0] - overlap) < 4 * max(tr.std_err[1], 1e-3)


def test_effective_hamiltonian():
    m = reference_device()
    sys = make_system(m, make_mode("boxcar", 0.5, 0.005), dims=(2, 2, 2), warmup=0)
    for t in (0.0, 0.1, 0.37, 0.5):
        gen = build_cascade_generators(sys, t)
        h = gen.h_eff.dense()
        np.testing.assert_allclose(h, h.conj().T, atol=1e-12)
    sp_ = sys.space
    h = build_cascade_generators(sys, 0.2).h_eff.dense()
    assert h[sp_.index((0,) * 6), sp_.index((1, 1, 1, 0, 0, 0))] == pytest.approx(m.g)
    with pytest.raises(ValueError):
        build_cascade_generators(sys, 10.0)


def test_zero_drive_gives_vacuum():
    m = reference_device(g_mhz=0.0)
    sys = make_system(m, make_mode("boxcar", 0.5, 0.005), dims=(2, 2, 2), warmup=0.5)
    tr = run_trajectories(sys, 20, seed=0)
    assert tr.moments.triple == 0
    assert np.all(tr.moments.n == 0) and np.all(tr.moments.nn == 0)
    assert tr.n_jumps == 0


def test_deterministic_for_seed(strong):
    sys, _ = strong
    a = run_trajectories(sys, 50, seed=9, initial="steady", top_level_max=1.0)
    b = run_trajectories(sys, 50, seed=9, initial="steady", top_level_max=1.0)
    c = run_trajectories(sys, 50, seed=10, initial="steady", top_level_max=1.0)
    assert a.moments.triple == b.moments.triple
    assert np.array_equal(a.moments.n, b.moments.n)
    assert a.config_hash == b.config_hash != c.config_hash
    assert not np.array_equal(a.moments.n, c.moments.n)


def test_norm_bookkeeping(strong):
    sys, _ = strong
    tr = run_trajectories(sys, 50, seed=3, initial="steady", top_level_max=1.0)
    assert tr.diagnostics["max_norm_rise"] <= 1e-10
    assert tr.diagnostics["max_jump_norm_err"] < 1e-10


def test_matches_master_equation(strong):
    sys, me = strong
    n = 400
    tr = run_trajectories(sys, n, seed=2, initial="steady", keep_states=True, top_level_max=1.0)
    rho = tr.density_matrix()
    assert np.trace(rho).real == pytest.approx(1.0, abs=1e-10)
    dist = 0.5 * np.abs(np.linalg.eigvalsh(rho - me.rho)).sum()
    assert dist < 5 / np.sqrt(n)
    z = (tr.moments.n - me.moments.n) / tr.std_err[1:4]
    assert np.all(np.abs(z) < 4)


def test_std_err_scaling(strong):
    sys, _ = strong
    small = run_trajectories(sys, 100, seed=2, initial="steady", top_level_max=1.0)
    large = run_trajectories(sys, 400, seed=2, initial="steady", top_level_max=1.0)
    ratio = small.std_err / large.std_err
    np.testing.assert_allclose(ratio, 2.0, rtol=0.2)


def test_truncation_error():
    m = reference_device(g_mhz=0.5, kerr=False)
    sys = make_system(m, make_mode("boxcar", 0.5, 0.005), dims=(2, 2, 2), warmup=0)
    with pytest.raises(TruncationError):
        run_trajectories(sys, 50, seed=0, initial="steady")


def test_system_guards():
    m = reference_device()
    with pytest.raises(ValueError):
        run_trajectories(make_system(m, make_mode("boxcar", 0.5, 0.005), dims=(2, 2, 2),
                                     warmup=0), 0)
    with pytest.raises(ValueError):
        master_equation_moments(make_system(m, make_mode("boxcar", 0.5, 0.005), warmup=0))
