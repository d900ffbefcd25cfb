import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import factorial

from tripspdc.device import gamma_total, reference_device
from tripspdc.steadystate import pt_cavity_correlators
from tripspdc.witness import (DRIFT_DELTA_W, TABLE_W, MomentSet, WitnessResult,
                              bootstrap_witness_variance, compute_witness,
                              gaussian_triple_prediction, moments_from_samples,
                              reference_moments, scaling_fit, systematic_bound,
                              witness_variance)


def test_reference_witness():
    w = compute_witness(reference_moments())
    assert w.w == pytest.approx(TABLE_W, abs=5e-6)
    assert w.w <= abs(reference_moments().triple)
    assert not w.clipped


def test_trivial_cases():
    assert compute_witness(MomentSet(0.0, np.zeros(3), np.zeros(3))).w == 0.0
    w = compute_witness(MomentSet(0.0, [0.1, 0.2, 0.3], [0.01, 0.02, 0.03]))
    assert w.w < 0


@settings(max_examples=30, deadline=None)
@given(phase=st.floats(0, 2 * math.pi))
def test_global_phase_invariance(phase):
    m = reference_moments()
    rotated = MomentSet(m.triple * np.exp(1j * phase), m.n, m.nn)
    assert compute_witness(rotated).w == pytest.approx(compute_witness(m).w, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(idx=st.integers(0, 5), bump=st.floats(0, 1e-2))
def test_monotone_in_subtracted_moments(idx, bump):
    m = reference_moments()
    n, nn = m.n.copy(), m.nn.copy()
    (n if idx < 3 else nn)[idx % 3] += bump
    assert compute_witness(MomentSet(m.triple, n, nn)).w <= compute_witness(m).w + 1e-15


def test_clipping_and_rejection():
    err = np.diag(np.full(7, 1e-3) ** 2)
    ok = compute_witness(MomentSet(0.02, [0.01, -5e-4, 0.01], [1e-3, 1e-3, 1e-3], cov=err))
    assert ok.clipped
    with pytest.raises(ValueError):
        compute_witness(MomentSet(0.02, [0.01, -5e-3, 0.01], [1e-3, 1e-3, 1e-3], cov=err))
    with pytest.raises(ValueError):
        compute_witness(MomentSet(0.02, [0.01, -1e-6, 0.01], [1e-3, 1e-3, 1e-3]))


def test_moment_set_validation():
    with pytest.raises(ValueError):
        MomentSet(0.0, [1, 2], [1, 2, 3])
    cov = np.zeros((7, 7))
    cov[0, 1] = 1.0
    with pytest.raises(ValueError):
        MomentSet(0.0, np.ones(3), np.ones(3), cov=cov)


def test_json_roundtrip():
    m = reference_moments()
    back = MomentSet.from_dict(__import__("json").loads(m.to_json()))
    assert back.triple == m.triple
    np.testing.assert_array_equal(back.cov, m.cov)
    np.testing.assert_array_equal(back.second_pair, m.second_pair)


# ---------------------------------------------------------------------------
# variance


def test_variance_only_z():
    m = reference_moments()
    cov = np.zeros((7, 7))
    cov[0, 0] = 2.5e-7
    assert witness_variance(MomentSet(m.triple, m.n, m.nn, cov=cov)) == pytest.approx(2.5e-7)


def test_variance_diagonal_symmetric():
    x = np.array([0.01, 0.02, 0.03])
    v = np.array([1e-6, 2e-6, 3e-6, 4e-6, 5e-6, 6e-6, 7e-6])
    m = MomentSet(0.05, x, x, cov=np.diag(v))
    # with X = Y each channel contributes (Var X + Var Y) / 4
    expected = v[0] + 0.25 * np.sum(v[1:4] + v[4:7])
    assert witness_variance(m) == pytest.approx(expected, rel=1e-12)


def test_variance_rejects_bad_covariance():
    m = reference_moments()
    bad = -np.eye(7)
    with pytest.raises(ValueError):
        witness_variance(MomentSet(m.triple, m.n, m.nn, cov=bad))


def test_delta_method_vs_bootstrap():
    rng = np.random.default_rng(4)
    m = reference_moments()
    mean = np.concatenate(([abs(m.triple)], m.n, m.nn))
    a = rng.normal(size=(7, 7)) * 0.3 + np.eye(7)
    corr = a @ a.T
    corr /= np.sqrt(np.outer(np.diag(corr), np.diag(corr)))
    # per-segment spread; the means of 500 segments carry about 1/sqrt(500) of it
    scale = np.concatenate(([1e-3], m.n * 0.08, m.nn * 0.15)) * np.sqrt(500)
    cov = corr * np.outer(scale, scale)
    samples = rng.multivariate_normal(mean, cov, size=500)
    delta = witness_variance(moments_from_samples(samples))
    boot = bootstrap_witness_variance(samples, 10_000, seed=1)
    assert delta / boot == pytest.approx(1.0, abs=0.15)


# ---------------------------------------------------------------------------
# scaling fit


def test_scaling_fit_exact():
    n = np.linspace(0.01, 0.5, 9)
    fit = scaling_fit(list(zip(n, 0.1 * np.sqrt(n) - 0.2 * n)))
    assert fit.b == pytest.approx(0.1, abs=1e-10)
    assert fit.c == pytest.approx(0.2, abs=1e-10)
    assert fit.n_peak == pytest.approx((0.1 / 0.4) ** 2)
    assert fit.predict(fit.n_peak) == pytest.approx(fit.w_max)
    assert fit.w_max == pytest.approx(0.01 / 0.8)


def test_scaling_fit_guards():
    with pytest.raises(ValueError):
        scaling_fit([(0.1, 0.0), (0.2, 0.0)])
    with pytest.raises(ValueError):
        scaling_fit([(0.1, 0.0), (0.1, 0.0), (0.1, 0.0)])
    with pytest.raises(ValueError):
        scaling_fit([(0.0, 0.0), (0.1, 0.0), (0.2, 0.0)])


def test_cavity_witness_weak_drive():
    for g_mhz in (0.003, 0.006):
        m = reference_device(g_mhz=g_mhz, kerr=False)
        c = pt_cavity_correlators(m)
        w = c.triple_abs - np.sum(np.sqrt(c.n * c.nn))
        lam2 = 2 * m.g / gamma_total(m)
        gt, gam = gamma_total(m), m.gammas
        s = sum(math.sqrt(gt ** 2 / (gam[i] * (gt - gam[i]))) for i in range(3))
        assert w == pytest.approx(lam2 * (1 - s * lam2), rel=1e-8)
    points = []
    for g_mhz in np.linspace(0.005, 0.04, 8):
        c = pt_cavity_correlators(reference_device(g_mhz=g_mhz, kerr=False))
        points.append((c.n.sum(), c.triple_abs - np.sum(np.sqrt(c.n * c.nn))))
    fit = scaling_fit(points)
    assert fit.b > 0 and fit.c > 0
    assert np.max(np.abs(fit.residuals)) < 0.02 * fit.w_max


# ---------------------------------------------------------------------------
# Gaussian-state prediction


def test_gaussian_prediction_reference():
    chk = gaussian_triple_prediction(reference_moments())
    assert abs(chk.prediction) == pytest.approx(2.73e-7, rel=0.01)
    assert chk.sigma == pytest.approx(4.28e-7, rel=0.02)
    assert chk.z_score == pytest.approx(27.0, abs=0.5)


def test_gaussian_prediction_zero_mean():
    m = MomentSet(0.01, np.ones(3), np.ones(3), first=np.zeros(3), second_pair=[0.2, 0.3, 0.4])
    assert gaussian_triple_prediction(m).prediction == 0


def _coherent(alpha, dim=10):
    k = np.arange(dim)
    v = np.exp(-abs(alpha) ** 2 / 2) * alpha ** k / np.sqrt(factorial(k))
    return v / np.linalg.norm(v)


def test_gaussian_prediction_coherent_product():
    alphas = [0.3 + 0.1j, -0.2 + 0.25j, 0.15 - 0.4j]
    dim = 10
    a = np.diag(np.sqrt(np.arange(1, dim)), 1)
    eye = np.eye(dim)
    psi = np.kron(np.kron(_coherent(alphas[0]), _coherent(alphas[1])), _coherent(alphas[2]))
    ops = [np.kron(np.kron(a, eye), eye), np.kron(np.kron(eye, a), eye), np.kron(np.kron(eye, eye), a)]
    ev = lambda op: psi.conj() @ op @ psi
    first = np.array([ev(o) for o in ops])
    pairs = np.array([ev(ops[1] @ ops[2]), ev(ops[0] @ ops[2]), ev(ops[0] @ ops[1])])
    direct = ev(ops[0] @ ops[1] @ ops[2])
    m = MomentSet(direct, np.ones(3), np.ones(3), first=first, second_pair=pairs)
    assert gaussian_triple_prediction(m).prediction == pytest.approx(direct, abs=1e-12)
    assert direct == pytest.approx(np.prod(alphas), abs=1e-12)


# ---------------------------------------------------------------------------
# systematics


def test_systematic_bound_trivial():
    w = compute_witness(reference_moments())
    out = systematic_bound(w)
    assert out.w == pytest.approx(w.w)
    assert out.sigma_sys_low == 0.0


def test_gain_overestimate_lowers_witness():
    m = reference_moments()
    w = compute_witness(m)
    scaled = m.scaled([1.02] * 3)
    assert abs(scaled.triple) == pytest.approx(abs(m.triple) * 1.02 ** -1.5)
    np.testing.assert_allclose(scaled.n, m.n / 1.02)
    np.testing.assert_allclose(scaled.nn, m.nn / 1.02 ** 2)
    low = systematic_bound(w, gain_bias=[0.02] * 3)
    assert low.w < w.w
    assert compute_witness(scaled).w == pytest.approx(low.w)
    with pytest.raises(ValueError):
        systematic_bound(w, gain_bias=[-0.1, 0, 0])


def test_drift_term():
    w = compute_witness(reference_moments())
    per_channel = 2 * DRIFT_DELTA_W / 3
    out = systematic_bound(w, drift=[per_channel] * 3)
    assert out.sigma_sys_low == pytest.approx(DRIFT_DELTA_W * abs(w.w))
    assert out.total_uncertainty == pytest.approx(out.sigma_stat + out.sigma_sys_low)
    with pytest.raises(ValueError):
        systematic_bound(WitnessResult(0.1, 0.0, 0.0, 0.0))
