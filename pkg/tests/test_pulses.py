import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripspdc.pulses import (QuadratureRecord, Shape, autocorrelation_lags, digitizer_mode,
                             filter_record, filter_records, make_mode, mode_autocorrelation,
                             read_record, write_record)


@pytest.mark.parametrize("shape,width", [("boxcar", 1.0), ("gaussian", 1.0), ("gaussian", 0.4),
                                         ("windowed_sinc", 1.05)])
def test_discrete_norm(shape, width):
    m = make_mode(shape, width, 0.005, window=5.0)
    assert abs(m.discrete_norm() - 1.0) < 1e-6
    assert np.isrealobj(m.samples)


def test_boxcar_amplitude():
    m = make_mode("boxcar", 2.0, 0.01)
    np.testing.assert_allclose(m.samples, 1 / np.sqrt(2.0))
    assert len(m.samples) == 200
    assert m.evaluate(1.999) == pytest.approx(1 / np.sqrt(2.0))
    assert m.evaluate(2.0) == 0.0


def test_gaussian_fwhm():
    m = make_mode("gaussian", 1.0, 0.001)
    center = m.support[0] + m.duration / 2
    peak = m.evaluate(center)
    assert m.evaluate(center + 0.5) == pytest.approx(peak / 2, rel=1e-9)
    assert m.evaluate(center - 0.5) == pytest.approx(peak / 2, rel=1e-9)


def test_digitizer_mode():
    m = digitizer_mode()
    assert m.shape is Shape.WINDOWED_SINC
    assert m.dt == 1.0 and m.window == 20.0 and m.width == 1.05
    assert abs(m.discrete_norm() - 1) < 1e-6
    assert np.argmax(m.samples) == 10


def test_errors():
    with pytest.raises(ValueError):
        make_mode("boxcar", 0.0, 0.01)
    with pytest.raises(ValueError):
        make_mode("gaussian", 1.0, 0.2)  # dt > width/8
    with pytest.raises(ValueError):
        make_mode("boxcar", 1.0, 0.003)  # not an integer number of samples
    rec = QuadratureRecord(200.0, np.zeros(10), np.zeros(10))
    with pytest.raises(ValueError):
        filter_record(rec, make_mode("boxcar", 1.0, 0.005))
    with pytest.raises(ValueError):
        QuadratureRecord(1.0, np.zeros(3), np.zeros(4))


def test_normalization_under_refinement():
    for shape in ("gaussian", "windowed_sinc"):
        coarse = make_mode(shape, 1.0, 0.01, window=4.0)
        fine = make_mode(shape, 1.0, 0.0025, window=4.0)
        assert abs(coarse.discrete_norm() - fine.discrete_norm()) < 1e-5


def test_constant_record():
    m = make_mode("boxcar", 1.0, 0.01)
    rec = QuadratureRecord(100.0, np.full(500, 3.0), np.zeros(500))
    x, p = filter_record(rec, m)
    assert len(x) == 500 - 100 + 1
    np.testing.assert_allclose(x, 3.0, rtol=1e-12)
    np.testing.assert_allclose(p, 0.0)


def test_delta_record_gives_reversed_filter():
    m = make_mode("gaussian", 0.5, 0.01)
    n = len(m.samples)
    x = np.zeros(3 * n)
    x[2 * n] = 2.0
    out, _ = filter_record(QuadratureRecord(100.0, x, x), m)
    # y[t] = f[2n - t] dt for t in (n, 2n]
    seg = out[n + 1: 2 * n + 1]
    np.testing.assert_allclose(seg, 2.0 * m.dt * m.samples[::-1][: len(seg)], atol=1e-15)


def test_white_noise_variance():
    rng = np.random.default_rng(11)
    # short filter so the 1e6 filtered samples are nearly independent
    m = make_mode("gaussian", 0.08, 0.01)
    sigma = 1.7
    x = rng.normal(0, sigma, 1_000_000)
    out, _ = filter_record(QuadratureRecord(100.0, x, x), m)
    assert np.var(out) == pytest.approx(sigma ** 2 * m.dt, rel=0.01)


def test_autocorrelation_boxcar_triangle():
    m = make_mode("boxcar", 0.5, 0.01)
    ac = mode_autocorrelation(m)
    lags = autocorrelation_lags(m)
    assert ac[len(ac) // 2] == pytest.approx(1 / m.dt)
    expected = (1 - np.abs(lags) / 0.5) / m.dt
    np.testing.assert_allclose(ac, expected, atol=1e-9)


@pytest.mark.parametrize("shape", ["gaussian", "windowed_sinc"])
def test_autocorrelation_even(shape):
    ac = mode_autocorrelation(make_mode(shape, 1.0, 0.05, window=6.0))
    np.testing.assert_allclose(ac, ac[::-1], atol=1e-12)


def test_digitizer_filtered_noise_autocorrelation():
    m = digitizer_mode()
    rng = np.random.default_rng(3)
    x = rng.normal(size=400_000)
    out, _ = filter_record(QuadratureRecord(1.0, x, x), m)
    n = len(m.samples)
    emp = np.array([np.mean(out[: len(out) - k] * out[k:]) for k in range(n)])
    pred = mode_autocorrelation(m)[n - 1:] * m.dt ** 2
    # Monte Carlo error of each lag estimate is about dt / sqrt(len(out))
    assert np.max(np.abs(emp - pred)) < 5 * m.dt / np.sqrt(len(out))


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2 ** 16))
def test_filter_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    m = make_mode("gaussian", 0.3, 0.01)
    r1, r2 = rng.normal(size=(2, 300))
    rec = lambda v: QuadratureRecord(100.0, v, -v)
    lhs, _ = filter_record(rec(a * r1 + b * r2), m)
    y1, _ = filter_record(rec(r1), m)
    y2, _ = filter_record(rec(r2), m)
    np.testing.assert_allclose(lhs, a * y1 + b * y2, atol=1e-12)


def test_per_channel_modes_match_shared_path():
    rng = np.random.default_rng(0)
    m = make_mode("boxcar", 1.0, 0.01)
    recs = [QuadratureRecord(100.0, *rng.normal(size=(2, 400)), channel=c) for c in range(3)]
    shared = filter_records(recs, m)
    per = filter_records(recs, [m, m, m])
    for (x1, p1), (x2, p2) in zip(shared, per):
        assert np.array_equal(x1, x2) and np.array_equal(p1, p2)
    with pytest.raises(ValueError):
        filter_records(recs, [m, m])


@pytest.mark.parametrize("suffix", [".csv", ".npz"])
def test_record_roundtrip(tmp_path, suffix):
    rng = np.random.default_rng(1)
    rec = QuadratureRecord(250.0, rng.normal(size=64), rng.normal(size=64), channel=2,
                           segment_id=17, on=False)
    path = tmp_path / f"rec{suffix}"
    write_record(path, rec)
    back = read_record(path)
    assert back.sample_rate == rec.sample_rate
    assert (back.channel, back.segment_id, back.on) == (2, 17, False)
    np.testing.assert_array_equal(back.x, rec.x)
    np.testing.assert_array_equal(back.p, rec.p)


def test_record_missing_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2\n3,4\n")
    with pytest.raises(ValueError):
        read_record(path)
