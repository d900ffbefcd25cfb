"""Command-line front end: sweeps, calibration, pipeline and self-test.

Every result file starts with comment lines carrying the manifest hash and the
seed. Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 self-test threshold violation.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import click
import numpy as np

from . import acceptance
from .cascade import TruncationError, make_system, manifest_hash, master_equation_moments, run_trajectories
from .device import REFERENCE_CONFIG_TEXT, ConfigError, DeviceModel, parse_config, parse_dims
from .outfield import output_correlators
from .pipeline import (CALIBRATED_GAINS_DB, DEVICE_TEMPERATURES_MK, CalibrationError, SNTJParams,
                       apply_compression, compression_profile, fit_sntj, gain_bias, reference_chains,
                       run_pipeline, segment_statistics, sntj_initial_guess, sntj_power)
from .pulses import make_mode
from .steadystate import SteadyStateError
from .witness import (DRIFT_DELTA_W, MomentSet, bootstrap_witness_variance, compute_witness,
                      reference_moments, scaling_fit, systematic_bound, witness_variance)

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_SELFTEST = 4

DEFAULT_CONFIG_TEXT = REFERENCE_CONFIG_TEXT + """
[sweep]
g_min_MHz = 0.057
g_over_gmin = 1.0 1.4 1.8 2.2 2.6 3.0 3.2
shape = boxcar
width = 1.0
dt = 0.005
n_traj = 2000
virtual_dims = 5 5 5

[filter]
g_MHz = 0.03
boxcar_widths = 0.25 0.5 1.0 1.5 2.0 3.0
gaussian_widths = 0.2 0.4 0.6 0.8 1.0 1.25 1.5
dt = 0.005
n_traj = 2000

[pipeline]
target = table
n_samples = 1000000
n_segments = 200
noise_photons = 0.15
n_resamples = 10000
gains_dB = 71.31 70.16 77.31
upper_gains_dB = 72.23 71.86 79.13
temperatures_mK = 43.7 41.1 45.5
drift_delta_w = 0.035

[calibration]
frequency_GHz = 6.831
f_idler_GHz = 9.82
bandwidth_Hz = 1e6
gain_dB = 70.16
t_noise_K = 0.15
temperature_mK = 41.1
idler_ratio = 0.478
compression = 0.05
noise = 0.01
n_points = 200
v_max_uV = 150
"""


class CliError(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    config_text: str
    seed: int
    output_dir: Optional[str] = None
    overrides: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"command": self.command, "config_path": self.config_path,
                "config_sha256": hashlib.sha256(self.config_text.encode()).hexdigest(),
                "seed": self.seed, "overrides": self.overrides}

    @property
    def hash(self) -> str:
        # the output location is excluded so that reruns into new files hash the same
        return manifest_hash(self.as_dict())


@dataclass
class Context:
    cp: configparser.ConfigParser
    model: DeviceModel
    dims: tuple[int, int, int]
    manifest: RunManifest
    ntraj: Optional[int]
    backend: str


def _load(command: str, config: Optional[str], seed: int, dims: Optional[str], ntraj: Optional[int],
          backend: str, out: Optional[str], extra: Optional[dict] = None) -> Context:
    cp = configparser.ConfigParser()
    cp.read_string(DEFAULT_CONFIG_TEXT)
    if config is not None:
        try:
            with open(config) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise CliError(f"cannot read config {config}: {exc}", EXIT_CONFIG) from exc
    if dims is not None:
        cp["truncation"]["dims"] = dims
    try:
        model = parse_config(cp)
        d = parse_dims(cp)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    text = io.StringIO()
    cp.write(text)
    overrides = {"dims": list(d), "ntraj": ntraj, "backend": backend, **(extra or {})}
    man = RunManifest(command, config, text.getvalue(), seed,
                      None if out is None else str(Path(out).parent), overrides)
    return Context(cp, model, d, man, ntraj, backend)


def _get(cp, section: str, key: str, kind=float):
    try:
        raw = cp[section][key]
        if kind is list:
            return _floats(raw)
        if kind is str:
            return raw.strip()
        return kind(float(raw)) if kind is int else kind(raw)
    except (KeyError, ValueError) as exc:
        raise CliError(f"config [{section}] {key}: {exc}", EXIT_CONFIG) from exc


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


def _emit(text: str, out: Optional[str]) -> None:
    if out is None:
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)


def _csv(ctx: Context, header: Sequence[str], rows: Sequence[Sequence], out: Optional[str],
         notes: Sequence[str] = ()) -> None:
    buf = io.StringIO()
    buf.write(f"# tripspdc {ctx.manifest.command}\n")
    buf.write(f"# manifest_hash={ctx.manifest.hash} seed={ctx.manifest.seed}\n")
    for n in notes:
        buf.write(f"# {n}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    _emit(buf.getvalue(), out)


def _json(ctx: Context, payload: dict, out: Optional[str]) -> None:
    doc = {"command": ctx.manifest.command, "manifest_hash": ctx.manifest.hash,
           "seed": ctx.manifest.seed, "manifest": ctx.manifest.as_dict(), **payload}
    _emit(json.dumps(doc, sort_keys=True, indent=1, default=_jsonable) + "\n", out)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, complex):
        return {"re": x.real, "im": x.imag}
    raise TypeError(type(x))


def _summary(lines: Sequence[str]) -> None:
    for line in lines:
        click.echo(line, err=True)


# ---------------------------------------------------------------------------
# backends


def _stats(m: MomentSet) -> np.ndarray:
    return np.concatenate(([abs(m.triple)], m.n, m.nn))


def _filter(shape: str, width: float, dt: float):
    try:
        if shape == "boxcar":
            return make_mode("boxcar", width, dt)
        return make_mode(shape, width, min(dt, width / 16))
    except ValueError as exc:
        raise CliError(f"filter {shape} {width}: {exc}", EXIT_CONFIG) from exc


def _virtual_dims(ctx: Context, section: str):
    # the dense oracle keeps its own, smaller virtual truncation
    key = "oracle_virtual_dims" if ctx.backend == "oracle" else "virtual_dims"
    raw = ctx.cp[section].get(key, "").strip() if ctx.cp.has_section(section) else ""
    if raw:
        return tuple(int(x) for x in _floats(raw))
    return (2, 2, 2) if ctx.backend == "oracle" else None


def _pt(model: DeviceModel, f) -> tuple[np.ndarray, np.ndarray]:
    """Analytic statistics; the perturbative output fields carry no sampling error."""
    if model.g == 0:
        return np.zeros(7), np.zeros(7)
    oc = output_correlators(model.without_kerr(), f)
    return np.concatenate(([abs(oc.triple)], oc.n_out, oc.nn_out)), np.zeros(7)


def _simulate(ctx: Context, model: DeviceModel, f, n_traj: int, vdims) -> tuple[np.ndarray, np.ndarray, float]:
    """(stats, std err, sigma_W) from the selected numerical backend."""
    if model.g == 0:
        return np.zeros(7), np.zeros(7), 0.0
    dims = ctx.dims
    if ctx.backend == "oracle" and ctx.manifest.overrides.get("dims_flag") is None:
        dims = (3, 3, 3)
    sys_ = make_system(model, f, dims=dims, virtual_dims=vdims)
    if ctx.backend == "oracle":
        m = master_equation_moments(sys_).moments
        return _stats(m), np.zeros(7), 0.0
    r = run_trajectories(sys_, n_traj, seed=ctx.manifest.seed)
    wr = compute_witness(r.moments)
    return r.moments.stats, r.std_err, wr.sigma_stat


def _w(stats: np.ndarray) -> float:
    return float(stats[0] - np.sum(np.sqrt(np.clip(stats[1:4], 0, None) * np.clip(stats[4:7], 0, None))))


def _slope(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def _ntraj(ctx: Context, section: str) -> int:
    return ctx.ntraj if ctx.ntraj is not None else _get(ctx.cp, section, "n_traj", int)


def _run(fn):
    """Map library exceptions onto exit codes."""
    try:
        fn()
    except click.ClickException:
        raise
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    except (TruncationError, SteadyStateError, CalibrationError, FloatingPointError,
            np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
        raise CliError(f"numerical failure: {exc}", EXIT_NUMERICAL) from exc


# ---------------------------------------------------------------------------
# commands

_common = [
    click.option("--config", type=click.Path(dir_okay=False), default=None,
                 help="INI file overriding the bundled defaults."),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--ntraj", type=int, default=None, help="Trajectories per point."),
    click.option("--dims", type=str, default=None, help='Truncation per mode, e.g. "4 4 4".'),
    click.option("--backend", type=click.Choice(["pt", "cascade", "oracle"]), default="cascade",
                 show_default=True),
    click.option("--out", type=click.Path(dir_okay=False), default=None,
                 help="Output file (default stdout)."),
]


def common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Three-mode down-conversion: analytic and simulated output-field statistics."""


@main.command("witness-sweep")
@common
def witness_sweep(config, seed, ntraj, dims, backend, out):
    """W versus total photon number over a sweep of the drive strength g."""
    ctx = _load("witness-sweep", config, seed, dims, ntraj, backend, out, {"dims_flag": dims})

    def go():
        cp = ctx.cp
        g_min = _get(cp, "sweep", "g_min_MHz")
        ratios = _get(cp, "sweep", "g_over_gmin", list)
        f = _filter(_get(cp, "sweep", "shape", str), _get(cp, "sweep", "width"), _get(cp, "sweep", "dt"))
        vdims = _virtual_dims(ctx, "sweep")
        rows = []
        for r in ratios:
            g_mhz = g_min * r
            model = ctx.model.with_g(2 * math.pi * g_mhz)
            pt, _ = _pt(model, f)
            w_sim = sig = n_sim = None
            if backend != "pt":
                st, _, sig = _simulate(ctx, model, f, _ntraj(ctx, "sweep"), vdims)
                w_sim, n_sim = _w(st), float(st[1:4].sum())
            rows.append([g_mhz, r, float(pt[1:4].sum()), _w(pt), n_sim, w_sim, sig])
        notes, lines = [], []
        pts = [(row[2], row[3]) for row in rows if row[2] > 0]
        if len(pts) >= 3:
            fit = scaling_fit(pts)
            # W ~ B sqrt(N) ~ g only well below the peak
            slope = _slope([row[0] for row in rows[:2]], [row[3] for row in rows[:2]])
            weak = [0.01 * g_min, 0.02 * g_min]
            w_weak = [_w(_pt(ctx.model.with_g(2 * math.pi * g), f)[0]) for g in weak]
            notes.append(f"scaling fit B={fit.b:.6g} C={fit.c:.6g} N_peak={fit.n_peak:.6g} "
                         f"W_max={fit.w_max:.6g}")
            notes.append(f"weak_drive_slope={_slope(weak, w_weak):.4f} sweep_low_end_slope={slope:.4f}")
            lines += notes[-2:]
        _csv(ctx, ["g_MHz", "g_over_gmin", "n_tot", "W_pt", "n_tot_sim", "W_sim", "sigma"], rows, out, notes)
        _summary(lines)
    _run(go)


@main.command("correlator-sweep")
@common
def correlator_sweep(config, seed, ntraj, dims, backend, out):
    """|<A1A2A3>|, <N_i> and <N_j N_k> versus g / g_min."""
    ctx = _load("correlator-sweep", config, seed, dims, ntraj, backend, out, {"dims_flag": dims})
    names = ["triple", "n1", "n2", "n3", "n2n3", "n1n3", "n1n2"]

    def go():
        cp = ctx.cp
        g_min = _get(cp, "sweep", "g_min_MHz")
        ratios = _get(cp, "sweep", "g_over_gmin", list)
        f = _filter(_get(cp, "sweep", "shape", str), _get(cp, "sweep", "width"), _get(cp, "sweep", "dt"))
        vdims = _virtual_dims(ctx, "sweep")
        rows = []
        for r in ratios:
            model = ctx.model.with_g(2 * math.pi * g_min * r)
            pt, _ = _pt(model, f)
            row = [g_min * r, r, *pt]
            if backend != "pt":
                st, se, _ = _simulate(ctx, model, f, _ntraj(ctx, "sweep"), vdims)
                row += [*st, *se]
            rows.append(row)
        header = ["g_MHz", "g_over_gmin"] + [f"{k}_pt" for k in names]
        if backend != "pt":
            header += [f"{k}_sim" for k in names] + [f"{k}_se" for k in names]
        slopes = [_slope([row[1] for row in rows], [row[2 + k] for row in rows]) for k in range(7)]
        note = "pt log-log slopes " + " ".join(f"{k}={s:.4f}" for k, s in zip(names, slopes))
        _csv(ctx, header, rows, out, [f"g_min_MHz={g_min:g}", note])
        _summary([note])
    _run(go)


@main.command("filter-sweep")
@common
def filter_sweep(config, seed, ntraj, dims, backend, out):
    """W versus width for boxcar and gaussian temporal modes."""
    ctx = _load("filter-sweep", config, seed, dims, ntraj, backend, out, {"dims_flag": dims})

    def go():
        cp = ctx.cp
        model = ctx.model.with_g(2 * math.pi * _get(cp, "filter", "g_MHz"))
        dt = _get(cp, "filter", "dt")
        vdims = _virtual_dims(ctx, "filter")
        rows, best = [], {}
        for shape in ("boxcar", "gaussian"):
            for width in _get(cp, "filter", f"{shape}_widths", list):
                f = _filter(shape, width, dt)
                if backend == "pt":
                    st, _ = _pt(model, f)
                    w, sig = _w(st), 0.0
                else:
                    st, _, sig = _simulate(ctx, model, f, _ntraj(ctx, "filter"), vdims)
                    w = _w(st)
                rows.append([shape, width, w, sig, backend])
                if shape not in best or w > best[shape][1]:
                    best[shape] = (width, w, sig)
        life = float(np.mean(1.0 / model.gammas))
        lines = [f"{k}: W_max={v[1]:.5g} +- {v[2]:.2g} at width {v[0]:g} us "
                 f"({v[0] / life:.1f} x mean lifetime {life:.3f} us)" for k, v in best.items()]
        _csv(ctx, ["shape", "width_us", "W", "sigma", "backend"], rows, out, lines)
        _summary(lines)
    _run(go)


def _calibration_data(cp, csv_in: Optional[str], seed: int):
    if csv_in is not None:
        try:
            data = np.genfromtxt(csv_in, delimiter=",", names=True, comments="#")
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read {csv_in}: {exc}", EXIT_CONFIG) from exc
        names = data.dtype.names or ()
        if "V_uV" not in names or "P_W" not in names:
            raise CliError("calibration CSV needs V_uV and P_W columns", EXIT_CONFIG)
        lam = np.asarray(data["lambda"], float) if "lambda" in names else np.ones(len(data))
        return np.asarray(data["V_uV"], float), np.asarray(data["P_W"], float), lam, None
    f = _get(cp, "calibration", "frequency_GHz")
    bw = _get(cp, "calibration", "bandwidth_Hz")
    truth = SNTJParams(10 ** (_get(cp, "calibration", "gain_dB") / 10) * bw,
                       _get(cp, "calibration", "t_noise_K"),
                       _get(cp, "calibration", "temperature_mK") * 1e-3, f,
                       _get(cp, "calibration", "idler_ratio"), _get(cp, "calibration", "f_idler_GHz"))
    n = _get(cp, "calibration", "n_points", int)
    v_max = _get(cp, "calibration", "v_max_uV")
    v = np.linspace(-v_max, v_max, n)
    rng = np.random.default_rng(seed)
    p_true = sntj_power(v, truth)
    # probe-tone compression: the gain sags with the SNTJ output power
    lam = compression_profile(1.0 - _get(cp, "calibration", "compression") * p_true / p_true.max())
    p = p_true * lam * (1 + _get(cp, "calibration", "noise") * rng.standard_normal(n))
    return v, p, lam, truth


@main.command("calibrate")
@click.argument("csv_in", required=False, type=click.Path(dir_okay=False))
@common
def calibrate(csv_in, config, seed, ntraj, dims, backend, out):
    """SNTJ gain calibration: uncorrected, corrected without idler, corrected with idler.

    CSV_IN has columns V_uV, P_W and optionally lambda (compression profile).
    Without it, a synthetic compressed sweep is generated from [calibration].
    """
    ctx = _load("calibrate", config, seed, dims, ntraj, backend, out,
                {"csv_in": None if csv_in is None else Path(csv_in).name})

    def go():
        cp = ctx.cp
        v, p, lam, truth = _calibration_data(cp, csv_in, seed)
        f = _get(cp, "calibration", "frequency_GHz")
        fi = _get(cp, "calibration", "f_idler_GHz")
        bw = _get(cp, "calibration", "bandwidth_Hz")
        t0 = _get(cp, "calibration", "temperature_mK") * 1e-3
        corrected = apply_compression(p, lam)
        fits = {}
        for name, power, idler in (("uncorrected", p, False), ("corrected_no_idler", corrected, False),
                                   ("corrected_with_idler", corrected, True)):
            init = sntj_initial_guess(v, power, f, fi if idler else 0.0, temperature=t0)
            if idler:
                init = SNTJParams(init.gain_bw, init.t_noise, init.temperature, f, 0.3, fi)
            fits[name] = fit_sntj(v, power, init, fit_idler=idler)
        rows = []
        for name, fit in fits.items():
            q = fit.params
            g_db = 10 * math.log10(q.gain_bw / bw)
            g_sd = 10 / math.log(10) * fit.std("gain_bw") / q.gain_bw
            r_sd = fit.std("idler_ratio") if "idler_ratio" in fit.free else 0.0
            rows.append([name, f, g_db, g_sd, q.t_noise, q.temperature * 1e3, q.idler_ratio, r_sd,
                         fit.residual_rms])
        up, best = fits["corrected_no_idler"].params.gain_bw, fits["corrected_with_idler"].params.gain_bw
        lines = [f"{row[0]:>22s}: gain {row[2]:.3f} +- {row[3]:.3f} dB, T_N {row[4]:.4g} K, "
                 f"T {row[5]:.2f} mK, idler ratio {row[6]:.3f} +- {row[7]:.3f}" for row in rows]
        lines.append(f"upper bound holds (no-idler gain > with-idler gain): {up > best} "
                     f"({10 * math.log10(up / best):+.3f} dB)")
        if truth is not None:
            lines.append(f"synthetic truth: gain {10 * math.log10(truth.gain_bw / bw):.3f} dB, "
                         f"T_N {truth.t_noise:g} K, T {truth.temperature * 1e3:g} mK, "
                         f"idler ratio {truth.idler_ratio:g}")
        _csv(ctx, ["variant", "frequency_GHz", "gain_dB", "gain_dB_sd", "t_noise_K", "temperature_mK",
                   "idler_ratio", "idler_ratio_sd", "residual_rms"], rows, out, lines)
        _summary(lines)
    _run(go)


@main.command("pipeline")
@common
def pipeline(config, seed, ntraj, dims, backend, out):
    """Synthesize records, extract moments and evaluate W with its error budget."""
    ctx = _load("pipeline", config, seed, dims, ntraj, backend, out)

    def go():
        cp = ctx.cp
        kind = _get(cp, "pipeline", "target", str)
        if kind == "table":
            target = reference_moments()
        elif kind == "zero":
            target = MomentSet(0.0, np.zeros(3), np.zeros(3))
        else:
            raise CliError(f"[pipeline] target must be 'table' or 'zero', got {kind!r}", EXIT_CONFIG)
        gains = _get(cp, "pipeline", "gains_dB", list)
        upper = _get(cp, "pipeline", "upper_gains_dB", list)
        temps = _get(cp, "pipeline", "temperatures_mK", list)
        if not (len(gains) == len(upper) == len(temps) == 3):
            raise CliError("[pipeline] gains, upper gains and temperatures need three entries", EXIT_CONFIG)
        chains = reference_chains(_get(cp, "pipeline", "noise_photons"), temps, gains)
        res = run_pipeline(target, chains, _get(cp, "pipeline", "n_samples", int), seed=seed,
                           n_segments=_get(cp, "pipeline", "n_segments", int), keep_run=True)
        m = res.moments
        wr = compute_witness(m)
        seg = segment_statistics(res.run, chains)
        boot = math.sqrt(bootstrap_witness_variance(seg, _get(cp, "pipeline", "n_resamples", int), seed=seed))
        drift = _get(cp, "pipeline", "drift_delta_w")
        low = systematic_bound(wr, gain_bias(upper, gains), (2 * drift / 3,) * 3)
        payload = {
            "target": target.to_dict(), "moments": m.to_dict(), "witness": wr.to_dict(),
            "sigma_delta": wr.sigma_stat, "sigma_bootstrap": boot,
            "lower_bound": low.to_dict(),
            "total_error": wr.sigma_stat + abs(wr.w) * drift,
        }
        _json(ctx, payload, out)
        _summary([f"W = {wr.w:.5g} +- {wr.sigma_stat:.3g} (delta) / {boot:.3g} (bootstrap), "
                  f"drift term {abs(wr.w) * drift:.3g}, gain-bound W_low = {low.w:.5g}"])
    _run(go)


@main.command("selftest")
@click.option("--full", is_flag=True, help="Include the trajectory criteria (minutes).")
@click.option("--only", type=str, default=None, help='Comma-separated criterion numbers, e.g. "1,3".')
@common
def selftest(full, only, config, seed, ntraj, dims, backend, out):
    """Run the acceptance checks; exit 4 if any threshold is missed."""
    ctx = _load("selftest", config, seed, dims, ntraj, backend, out, {"full": full, "only": only})

    def go():
        if only:
            try:
                nums = sorted(int(x) for x in only.split(","))
            except ValueError as exc:
                raise CliError(f"--only: {exc}", EXIT_CONFIG) from exc
            bad = [k for k in nums if k not in acceptance.ALL]
            if bad:
                raise CliError(f"unknown criteria {bad}", EXIT_CONFIG)
        else:
            nums = sorted(acceptance.ALL if full else acceptance.FAST)
        kw = {"seed": seed}
        if ntraj is not None:
            kw["n_traj"] = ntraj
        results = acceptance.run_checks(nums, echo=click.echo, **kw)
        if out is not None:
            _json(ctx, {"results": [{"criterion": r.number, "name": r.name, "passed": r.passed,
                                     "detail": r.detail} for r in results]}, out)
        failed = [r.number for r in results if not r.passed]
        if failed:
            raise CliError(f"criteria failed: {failed}", EXIT_SELFTEST)
    _run(go)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
