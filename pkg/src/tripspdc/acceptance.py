"""Acceptance checks shared by the test suite and ``tripspdc selftest``.

Each check returns a CheckResult; nothing here asserts. Thresholds are module
constants so that a failing check reports the number it missed by.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cascade import (build_cascade_generators, make_system, master_equation_moments,
                      run_trajectories)
from .device import CHARACTERIZED_GAMMA_TOT, REFERENCE_GAMMA_EXT_MHZ, REFERENCE_GAMMA_INT_MHZ
from .device import build_hamiltonian, reference_device
from .fock import HilbertSpace
from .outfield import output_correlators
from .pipeline import (IDLER_FREQUENCIES_GHZ, IDLER_RATIOS, ChannelChain, SNTJParams,
                       bose_einstein, fit_sntj, run_pipeline, segment_statistics, sntj_power)
from .pulses import digitizer_mode, make_mode
from .steadystate import (cavity_correlators, device_liouvillian, liouvillian_steady_state,
                          pt_cavity_correlators)
from .witness import (MomentSet, TABLE_TRIPLE, TABLE_W, bootstrap_witness_variance,
                      compute_witness, gaussian_triple_prediction, moments_from_samples,
                      reference_moments, witness_variance)

CASCADE_WIDTHS = (0.5, 1.0, 2.0, 4.0)
BOXCAR_SWEEP = (0.5, 1.0, 1.5, 2.0, 3.0)
GAUSSIAN_SWEEP = (0.4, 0.6, 0.8, 1.0, 1.25, 1.5)
N_TRAJ = 2000
Z_MAX = 3.0


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    runtime: float = 0.0
    data: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"criterion {self.number:2d} {tag}  {self.name}: {self.detail} [{self.runtime:.1f} s]"


def _timed(number: int, name: str, fn: Callable[[], tuple[bool, str, dict]]) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail, data = fn()
    return CheckResult(number, name, bool(passed), detail, time.perf_counter() - t0, data)


def sim_filter(shape: str, width: float, dt: float = 0.005):
    """Filter sampled on the cascade grid (boxcar widths must be multiples of dt)."""
    if shape == "boxcar":
        return make_mode("boxcar", width, dt)
    return make_mode(shape, width, min(dt, width / 16))


def _slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _w(stats: np.ndarray) -> float:
    return float(stats[0] - np.sum(np.sqrt(np.clip(stats[1:4], 0, None) * np.clip(stats[4:7], 0, None))))


def _pt_stats(model, f) -> np.ndarray:
    oc = output_correlators(model, f)
    return np.concatenate(([abs(oc.triple)], oc.n_out, oc.nn_out))


# ---------------------------------------------------------------------------


def witness_arithmetic() -> CheckResult:
    def run():
        m = reference_moments()
        w = compute_witness(m).w
        best = min(_call_time(compute_witness, m) for _ in range(200))
        ok = abs(w - TABLE_W) <= 1e-5 and best < 1e-3
        return ok, f"W = {w:.6e} (target {TABLE_W:.3e} +- 1e-5), call {best * 1e6:.0f} us", {"w": w}
    return _timed(1, "witness arithmetic", run)


def _call_time(fn, *args) -> float:
    t0 = time.perf_counter()
    fn(*args)
    return time.perf_counter() - t0


def pt_vs_oracle(lams: Sequence[float] = (0.005, 0.01, 0.02), dims=(4, 4, 4)) -> CheckResult:
    labels = ["|a1a2a3|", "n1", "n2", "n3", "n2n3", "n1n3", "n1n2"]

    def run():
        base = reference_device(kerr=False)
        space = HilbertSpace(dims)
        errs = []
        for lam in lams:
            model = base.with_g(lam * float(np.sum(base.gammas)))
            pt = pt_cavity_correlators(model)
            ex = cavity_correlators(liouvillian_steady_state(model, space, kerr=False))
            a = np.concatenate(([pt.triple_abs], pt.n, pt.nn))
            b = np.concatenate(([ex.triple_abs], ex.n, ex.nn))
            errs.append(np.abs(a - b) / np.abs(b))
        errs = np.array(errs)
        slopes = np.array([_slope(lams, errs[:, k]) for k in range(7)])
        worst = int(np.argmax(errs[-1]))
        ok = errs[-1].max() <= 0.05 and np.all(np.abs(slopes - 2.0) <= 0.5)
        detail = (f"max rel err at lambda={lams[-1]}: {errs[-1].max():.3%} ({labels[worst]}); "
                  f"slopes {np.array2string(slopes, precision=2)}")
        return ok, detail, {"errors": errs.tolist(), "slopes": slopes.tolist()}
    return _timed(2, "PT vs exact steady state", run)


def cascade_vs_analytic(widths: Sequence[float] = CASCADE_WIDTHS, n_traj: int = N_TRAJ,
                        seed: int = 0, kerr: bool = True, dims=(4, 4, 4)) -> CheckResult:
    def run():
        model = reference_device(kerr=kerr)
        rows, worst = [], 0.0
        for w in widths:
            f = sim_filter("boxcar", w)
            r = run_trajectories(make_system(model, f, dims=dims), n_traj, seed=seed)
            pt = _pt_stats(model.without_kerr(), f)
            z = (r.moments.stats - pt) / np.where(r.std_err > 0, r.std_err, np.inf)
            rows.append({"width": w, "sim": r.moments.stats.tolist(), "se": r.std_err.tolist(),
                         "pt": pt.tolist(), "z": z.tolist()})
            worst = max(worst, float(np.max(np.abs(z))))
        zs = "; ".join(f"{row['width']:g} us z(triple)={row['z'][0]:+.1f} "
                       f"max|z(n,nn)|={np.max(np.abs(row['z'][1:])):.1f}" for row in rows)
        return worst <= Z_MAX, f"worst |z| {worst:.1f} (limit {Z_MAX:g}); {zs}", {"rows": rows}
    return _timed(3, "cascade vs analytic output correlators", run)


def scaling_exponents(fractions: Sequence[float] = (0.1, 0.2, 0.4, 0.7, 1.0)) -> CheckResult:
    def run():
        base = reference_device(kerr=False)
        out = {}
        ok = True
        for shape, width in (("boxcar", 1.0), ("gaussian", 1.0)):
            f = sim_filter(shape, width)
            gs = base.g * np.asarray(fractions)
            st = np.array([_pt_stats(base.with_g(g), f) for g in gs])
            slopes = np.array([_slope(gs, st[:, k]) for k in range(7)])
            target = np.array([1.0] + [2.0] * 6)
            ok &= bool(np.all(np.abs(slopes - target) <= 0.02))
            out[shape] = slopes.tolist()
        detail = "; ".join(f"{k}: triple {v[0]:.3f}, n/nn {min(v[1:]):.3f}..{max(v[1:]):.3f}"
                           for k, v in out.items())
        return ok, detail, out
    return _timed(4, "scaling exponents", run)


def scaling_law(g_over_gmin: Optional[Sequence[float]] = None, g_min_mhz: float = 0.057,
                shape: str = "boxcar", width: float = 1.0) -> CheckResult:
    from .witness import scaling_fit

    def run():
        ratios = np.geomspace(0.1, 3.2, 12) if g_over_gmin is None else np.asarray(g_over_gmin)
        base = reference_device(kerr=False)
        f = sim_filter(shape, width)
        pts = []
        for r in ratios:
            st = _pt_stats(base.with_g(2 * math.pi * g_min_mhz * r), f)
            pts.append((float(st[1:4].sum()), _w(st)))
        pts = np.array(pts)
        fit = scaling_fit(pts)
        w_max = float(pts[:, 1].max())
        resid = float(np.max(np.abs(fit.residuals))) / w_max
        inside = pts[:, 0].min() < fit.n_peak < pts[:, 0].max()
        ok = resid < 0.02 and fit.b > 0 and fit.c > 0 and inside
        detail = (f"B={fit.b:.4f} C={fit.c:.4f} N*={fit.n_peak:.4f} in "
                  f"[{pts[:, 0].min():.4f}, {pts[:, 0].max():.4f}], max resid {resid:.2e} of W_max")
        return ok, detail, {"points": pts.tolist(), "b": fit.b, "c": fit.c}
    return _timed(5, "scaling law W = B sqrt(N) - C N", run)


def _sweep_witness(model, shape, widths, n_traj, seed, dims):
    rows = []
    for w in widths:
        f = sim_filter(shape, w)
        r = run_trajectories(make_system(model, f, dims=dims), n_traj, seed=seed)
        wr = compute_witness(r.moments)
        rows.append((w, wr.w, wr.sigma_stat))
    return np.array(rows)


def filter_shape(n_traj: int = N_TRAJ, seed: int = 0, boxcar: Sequence[float] = BOXCAR_SWEEP,
                 gaussian: Sequence[float] = GAUSSIAN_SWEEP, dims=(4, 4, 4)) -> CheckResult:
    def run():
        model = reference_device()
        b = _sweep_witness(model, "boxcar", boxcar, n_traj, seed, dims)
        g = _sweep_witness(model, "gaussian", gaussian, n_traj, seed, dims)
        ib, ig = int(np.argmax(b[:, 1])), int(np.argmax(g[:, 1]))
        gap = g[ig, 1] - b[ib, 1]
        sep = gap / math.hypot(g[ig, 2], b[ib, 2])
        lifetime = float(np.mean(1.0 / model.gammas))
        ratio = g[ig, 0] / lifetime
        ok = sep >= 2.0 and 2.0 <= ratio <= 10.0
        detail = (f"W_max gaussian {g[ig, 1]:.4f}+-{g[ig, 2]:.4f} at {g[ig, 0]:g} us, boxcar "
                  f"{b[ib, 1]:.4f}+-{b[ib, 2]:.4f} at {b[ib, 0]:g} us, separation {sep:.1f} sigma, "
                  f"gaussian peak at {ratio:.1f} x mean lifetime {lifetime:.3f} us")
        return ok, detail, {"boxcar": b.tolist(), "gaussian": g.tolist()}
    return _timed(6, "filter shape", run)


def unit_conventions() -> CheckResult:
    def run():
        tot = 2 * math.pi * (np.array(REFERENCE_GAMMA_EXT_MHZ) + np.array(REFERENCE_GAMMA_INT_MHZ))
        sig = np.array([float(f"{x:.4g}") for x in tot])
        ok = np.allclose(np.round(tot, 3), CHARACTERIZED_GAMMA_TOT, atol=5e-4)
        return ok, f"2 pi x total rates = {np.array2string(sig)} rad/us", {"angular": tot.tolist()}
    return _timed(7, "unit conventions", run)


CAL_TRUTH = SNTJParams(1.0e13, 0.15, 0.0411, 6.831, IDLER_RATIOS[1], IDLER_FREQUENCIES_GHZ[1])


def calibration_round_trip(noise: float = 0.01, n_points: int = 200, v_max: float = 150.0,
                           seed: int = 0, truth: SNTJParams = CAL_TRUTH) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        v = np.linspace(-v_max, v_max, n_points)
        p = sntj_power(v, truth) * (1 + noise * rng.standard_normal(n_points))
        init = SNTJParams(1.3 * truth.gain_bw, 1.3 * truth.t_noise, 1.3 * truth.temperature,
                          truth.frequency, 0.6 * truth.idler_ratio, truth.f_idler)
        fit = fit_sntj(v, p, init)
        no_idler = fit_sntj(v, p, init, fit_idler=False)
        names = ("gain_bw", "t_noise", "temperature", "idler_ratio")
        rel = {k: getattr(fit.params, k) / getattr(truth, k) - 1 for k in names}
        crb = {k: fit.std(k) / getattr(truth, k) for k in names}
        recovered = all(abs(x) <= 0.01 for x in rel.values())
        upper = no_idler.params.gain_bw > fit.params.gain_bw
        detail = ("rel err " + ", ".join(f"{k} {rel[k]:+.2%} (fit sd {crb[k]:.1%})" for k in names)
                  + f"; no-idler gain / with-idler gain = {no_idler.params.gain_bw / fit.params.gain_bw:.3f}")
        return recovered and upper, detail, {"rel": rel, "sd": crb, "upper_bound": upper}
    return _timed(8, "calibration round trip", run)


def _synthetic_segments(seed: int, n_seg: int = 500) -> np.ndarray:
    m = reference_moments()
    rng = np.random.default_rng(seed)
    return rng.multivariate_normal(m.stats, m.cov * n_seg, size=n_seg)


def error_propagation(seeds: Sequence[int] = (0, 1, 2), n_resamples: int = 10_000) -> CheckResult:
    def run():
        cases = [(f"mvn seed {s}", _synthetic_segments(s)) for s in seeds]
        chains = [ChannelChain(1.0, 0.15, f, bose_einstein(f, t))
                  for f, t in zip((5.56, 6.831, 7.902), (43.7, 41.1, 45.5))]
        pr = run_pipeline(reference_moments(), chains, 1_000_000, seed=7, n_segments=200, keep_run=True)
        cases.append(("pipeline", segment_statistics(pr.run, chains)))
        ratios = {}
        for name, seg in cases:
            delta = witness_variance(moments_from_samples(seg))
            boot = bootstrap_witness_variance(seg, n_resamples, seed=11)
            ratios[name] = boot / delta
        worst = max(abs(r - 1) for r in ratios.values())
        detail = "bootstrap / delta variance: " + ", ".join(f"{k} {v:.3f}" for k, v in ratios.items())
        return worst <= 0.15, detail, ratios
    return _timed(9, "error propagation", run)


def non_gaussianity() -> CheckResult:
    def run():
        m = reference_moments()
        chk = gaussian_triple_prediction(m)
        ok = abs(chk.prediction) < 1e-6 and chk.z_score > 20 and math.isclose(abs(m.triple), TABLE_TRIPLE)
        detail = (f"gaussian prediction {abs(chk.prediction):.2e} vs measured {abs(m.triple):.3e}, "
                  f"z = {chk.z_score:.1f}")
        return ok, detail, {"prediction": abs(chk.prediction), "z": chk.z_score}
    return _timed(10, "non-gaussianity", run)


def invariant_suite(seed: int = 5) -> CheckResult:
    def run():
        parts = {}
        modes = [make_mode("boxcar", 1.0, 0.005), make_mode("gaussian", 0.8, 0.005),
                 make_mode("windowed_sinc", 1.05, 0.01, window=4.0), digitizer_mode()]
        parts["filter norm"] = max(abs(f.discrete_norm() - 1) for f in modes) < 1e-9

        model = reference_device()
        h = build_hamiltonian(model, HilbertSpace((4, 4, 4))).data
        sys = make_system(reference_device(g_mhz=0.3), sim_filter("boxcar", 0.5),
                          dims=(3, 3, 3), virtual_dims=(2, 2, 2), warmup=0.5)
        herm = abs(h - h.conj().T).max()
        for t in np.linspace(sys.window_start, sys.t_grid[-1], 7):
            he = build_cascade_generators(sys, float(t)).h_eff.data
            herm = max(herm, abs(he - he.conj().T).max())
        parts["hermiticity"] = herm < 1e-12

        r1 = run_trajectories(sys, 300, seed=seed, top_level_max=1.0)
        r2 = run_trajectories(sys, 300, seed=seed, top_level_max=1.0)
        d = r1.diagnostics
        parts["norm bookkeeping"] = d["max_norm_rise"] <= 1e-12 and d["max_jump_norm_err"] <= 1e-10
        parts["determinism"] = (np.array_equal(r1.moments.stats, r2.moments.stats)
                                and r1.config_hash == r2.config_hash)

        me = master_equation_moments(sys)
        lv = device_liouvillian(model, HilbertSpace((3, 3, 3)))
        n = 27
        trace_row = np.eye(n).reshape(-1)
        parts["trace preservation"] = (abs(np.trace(me.rho) - 1) < 1e-10
                                       and abs(lv.T @ trace_row).max() < 1e-9)
        detail = ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in parts.items())
        return all(parts.values()), detail, {k: bool(v) for k, v in parts.items()}
    return _timed(11, "invariant suite", run)


FAST = {1: witness_arithmetic, 2: pt_vs_oracle, 4: scaling_exponents, 5: scaling_law,
        7: unit_conventions, 8: calibration_round_trip, 9: error_propagation,
        10: non_gaussianity, 11: invariant_suite}
SLOW = {3: cascade_vs_analytic, 6: filter_shape}
ALL = dict(sorted({**FAST, **SLOW}.items()))


def run_checks(numbers: Optional[Sequence[int]] = None, echo: Optional[Callable[[str], None]] = None,
               **kwargs) -> list[CheckResult]:
    """Run the selected checks in order; kwargs go to checks that accept them."""
    import inspect

    out = []
    for k in (sorted(ALL) if numbers is None else numbers):
        fn = ALL[k]
        accepted = inspect.signature(fn).parameters
        res = fn(**{a: v for a, v in kwargs.items() if a in accepted})
        if echo is not None:
            echo(res.line())
        out.append(res)
    return out
