"""Temporal mode functions and FIR filtering of sampled quadrature records.

Discrete normalization is sum |f_k|^2 dt = 1, so filtered vacuum noise has a
variance independent of the sample spacing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

GAUSS_HALF_SPAN = 4.0  # gaussian truncated at +-4 sigma
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class Shape(str, enum.Enum):
    BOXCAR = "boxcar"
    GAUSSIAN = "gaussian"
    WINDOWED_SINC = "windowed_sinc"


@dataclass(frozen=True)
class TemporalMode:
    shape: Shape
    width: float
    support: tuple[float, float]
    dt: float
    samples: np.ndarray
    window: float = 0.0  # sinc window length t_c; unused for the other shapes
    _scale: float = field(default=1.0, repr=False)

    @property
    def times(self) -> np.ndarray:
        return self.support[0] + self.dt * np.arange(len(self.samples))

    @property
    def duration(self) -> float:
        return self.support[1] - self.support[0]

    def evaluate(self, t) -> np.ndarray:
        """Continuous mode function, unit L2 norm over the support."""
        t = np.asarray(t, dtype=float)
        return self._scale * _raw(self.shape, t - self.support[0], self.width, self.window)

    def shifted(self, offset: float) -> "TemporalMode":
        lo, hi = self.support
        return TemporalMode(self.shape, self.width, (lo + offset, hi + offset), self.dt,
                            self.samples, self.window, self._scale)

    def discrete_norm(self) -> float:
        return float(np.sum(np.abs(self.samples) ** 2) * self.dt)


def _raw(shape: Shape, t: np.ndarray, width: float, window: float) -> np.ndarray:
    """Un-normalized shape on local time t (support starts at 0)."""
    if shape is Shape.BOXCAR:
        return np.where((t >= 0) & (t < width), 1.0, 0.0)
    if shape is Shape.GAUSSIAN:
        sigma = width / FWHM_PER_SIGMA
        tc = GAUSS_HALF_SPAN * sigma
        inside = (t >= 0) & (t <= 2 * tc)
        return np.where(inside, np.exp(-0.5 * ((t - tc) / sigma) ** 2), 0.0)
    if shape is Shape.WINDOWED_SINC:
        inside = (t >= 0) & (t <= window)
        hann = np.sin(np.pi * t / window) ** 2
        return np.where(inside, hann * np.sinc((t - window / 2) / width), 0.0)
    raise ValueError(f"unknown shape {shape}")


def _span(shape: Shape, width: float, window: float) -> float:
    if shape is Shape.BOXCAR:
        return width
    if shape is Shape.GAUSSIAN:
        return 2 * GAUSS_HALF_SPAN * width / FWHM_PER_SIGMA
    return window


def _continuous_scale(shape: Shape, width: float, window: float) -> float:
    if shape is Shape.BOXCAR:
        return 1.0 / math.sqrt(width)
    if shape is Shape.GAUSSIAN:
        sigma = width / FWHM_PER_SIGMA
        # int exp(-x^2/sigma^2) over [-4 sigma, 4 sigma]
        mass = sigma * math.sqrt(math.pi) * erf(GAUSS_HALF_SPAN)
        return 1.0 / math.sqrt(mass)
    # composite Simpson on a fine grid; the integrand is smooth on [0, t_c]
    n = 20001
    t = np.linspace(0.0, window, n)
    y = _raw(shape, t, width, window) ** 2
    h = window / (n - 1)
    mass = h / 3 * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum())
    return 1.0 / math.sqrt(mass)


def make_mode(shape: str | Shape, width: float, dt: float, *, window: float = 20.0,
              start: float = 0.0, check_resolution: bool = True) -> TemporalMode:
    """Sampled, normalized temporal mode.

    width is the boxcar length, the gaussian FWHM, or the sinc lobe scale.
    For the windowed sinc, ``window`` is the Hann window / support length and
    the resolution guard is applied to it rather than to the lobe scale, since
    the digitizer filter is naturally sampled at about one point per lobe.
    """
    shape = Shape(shape)
    if not width > 0:
        raise ValueError("width must be positive")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if shape is Shape.WINDOWED_SINC and not window > 0:
        raise ValueError("sinc window must be positive")
    guard = window if shape is Shape.WINDOWED_SINC else width
    if check_resolution and dt > guard / 8 * (1 + 1e-12):
        raise ValueError(f"dt={dt} too coarse for width {guard} (need dt <= width/8)")
    span = _span(shape, width, window)
    if shape is Shape.BOXCAR:
        n = int(round(span / dt))
        if not math.isclose(n * dt, span, rel_tol=1e-9):
            raise ValueError("boxcar width must be an integer number of samples")
    else:
        n = int(math.floor(span / dt + 1e-9)) + 1
    t_local = dt * np.arange(n)
    raw = _raw(shape, t_local, width, window)
    norm = math.sqrt(np.sum(raw ** 2) * dt)
    if norm == 0:
        raise ValueError("mode has no support on the sample grid")
    samples = raw / norm
    return TemporalMode(shape, float(width), (float(start), float(start) + span), float(dt),
                        samples, float(window), _continuous_scale(shape, width, window))


def digitizer_mode(sample_rate_mhz: float = 1.0, window: float = 20.0,
                   lobe: float = 1.05) -> TemporalMode:
    """Hann-windowed sinc approximating the digitizer anti-aliasing filter."""
    return make_mode(Shape.WINDOWED_SINC, lobe, 1.0 / sample_rate_mhz, window=window)


@dataclass(frozen=True)
class QuadratureRecord:
    sample_rate: float  # MHz
    x: np.ndarray
    p: np.ndarray
    channel: int = 0
    segment_id: int = 0
    on: bool = True

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if x.shape != p.shape or x.ndim != 1:
            raise ValueError("x and p must be 1-D and of equal length")
        if not self.sample_rate > 0:
            raise ValueError("sample rate must be positive")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "p", p)

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def complex_amplitude(self) -> np.ndarray:
        return 0.5 * (self.x + 1j * self.p)


def _fir(signal: np.ndarray, taps: np.ndarray, dt: float) -> np.ndarray:
    # y[t] = sum_tau x[t + tau] f[tau] dt, valid part only
    return np.correlate(signal, taps, mode="valid") * dt


def filter_record(rec: QuadratureRecord, mode: TemporalMode) -> tuple[np.ndarray, np.ndarray]:
    """Filtered (X, P) streams, each of length len(rec) - len(mode) + 1."""
    if not math.isclose(rec.dt, mode.dt, rel_tol=1e-9):
        raise ValueError(f"record spacing {rec.dt} us differs from mode grid {mode.dt} us")
    if len(rec.x) < len(mode.samples):
        raise ValueError("record shorter than filter")
    return _fir(rec.x, mode.samples, mode.dt), _fir(rec.p, mode.samples, mode.dt)


def filter_records(records: Sequence[QuadratureRecord],
                   modes: TemporalMode | Sequence[TemporalMode]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Filter one record per channel, with a shared mode or one mode per channel."""
    if isinstance(modes, TemporalMode):
        modes = [modes] * len(records)
    if len(modes) != len(records):
        raise ValueError("need one mode per record")
    return [filter_record(r, m) for r, m in zip(records, modes)]


def mode_autocorrelation(mode: TemporalMode) -> np.ndarray:
    """sum_n f[n] f[n+k] for k = -(L-1) .. L-1; the zero-lag value is 1/dt."""
    f = mode.samples
    return np.correlate(f, f, mode="full")


def autocorrelation_lags(mode: TemporalMode) -> np.ndarray:
    n = len(mode.samples)
    return mode.dt * np.arange(-(n - 1), n)


# ---------------------------------------------------------------------------
# record files


def write_record(path: str | Path, rec: QuadratureRecord) -> None:
    """CSV with a commented key=value header followed by x,p columns."""
    path = Path(path)
    header = (f"channel={rec.channel}\nsample_rate_MHz={rec.sample_rate!r}\n"
              f"segment_id={rec.segment_id}\non_off_flag={'on' if rec.on else 'off'}\nx,p")
    if path.suffix == ".npz":
        np.savez(path, x=rec.x, p=rec.p, channel=rec.channel, sample_rate_MHz=rec.sample_rate,
                 segment_id=rec.segment_id, on_off_flag=int(rec.on))
        return
    np.savetxt(path, np.column_stack([rec.x, rec.p]), delimiter=",", header=header,
               fmt="%.17g")


def read_record(path: str | Path) -> QuadratureRecord:
    path = Path(path)
    if path.suffix == ".npz":
        z = np.load(path)
        return QuadratureRecord(float(z["sample_rate_MHz"]), z["x"], z["p"], int(z["channel"]),
                                int(z["segment_id"]), bool(z["on_off_flag"]))
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
    try:
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        return QuadratureRecord(float(meta["sample_rate_MHz"]), data[:, 0], data[:, 1],
                                int(meta["channel"]), int(meta["segment_id"]),
                                meta.get("on_off_flag", "on") == "on")
    except KeyError as exc:
        raise ValueError(f"record header missing {exc}") from exc
