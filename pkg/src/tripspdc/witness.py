"""Tripartite entanglement witness, its scaling law, and error propagation.

The witness is W = |<A1 A2 A3>| - sum_i sqrt(<N_i> <N_j N_k>), where (j, k)
are the two modes other than i. Throughout, arrays of pair quantities are
indexed by that complementary mode: nn[0] = <N2 N3>, nn[1] = <N1 N3>,
nn[2] = <N1 N2>; likewise second_pair[0] = <A2 A3> and so on.

Statistics vectors are ordered (Z, X1, X2, X3, Y1, Y2, Y3) with Z = |triple|,
X_i = <N_i>, Y_i = nn[i].
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

N_STATS = 7


@dataclass(frozen=True)
class MomentSet:
    triple: complex
    n: np.ndarray
    nn: np.ndarray
    first: Optional[np.ndarray] = None
    second_pair: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None  # covariance of the estimates, 7 x 7
    first_err: Optional[np.ndarray] = None
    second_pair_err: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "triple", complex(self.triple))
        for name in ("n", "nn"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (3,):
                raise ValueError(f"{name} needs three entries")
            object.__setattr__(self, name, arr)
        for name in ("first", "second_pair", "first_err", "second_pair_err"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=complex if "err" not in name else float))
        if self.cov is not None:
            c = np.asarray(self.cov, dtype=float)
            if c.shape != (N_STATS, N_STATS):
                raise ValueError("cov must be 7 x 7 over (Z, X1..3, Y1..3)")
            if not np.allclose(c, c.T, rtol=1e-9, atol=1e-30):
                raise ValueError("cov must be symmetric")
            object.__setattr__(self, "cov", c)

    @property
    def stats(self) -> np.ndarray:
        return np.concatenate(([abs(self.triple)], self.n, self.nn))

    @property
    def std_err(self) -> Optional[np.ndarray]:
        if self.cov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def scaled(self, gain_factors: Sequence[float]) -> "MomentSet":
        """Moments re-referenced to gains multiplied by (1 + b_i) = gain_factors[i]."""
        c = np.asarray(gain_factors, float)
        pair = np.array([c[1] * c[2], c[0] * c[2], c[0] * c[1]])
        tri = 1.0 / math.sqrt(float(np.prod(c)))
        jac = np.concatenate(([tri], 1.0 / c, 1.0 / pair))
        cov = None if self.cov is None else self.cov * np.outer(jac, jac)
        return replace(self, triple=self.triple * tri, n=self.n / c, nn=self.nn / pair, cov=cov)

    def to_dict(self) -> dict:
        def enc(v):
            if v is None:
                return None
            arr = np.asarray(v)
            if np.iscomplexobj(arr):
                return {"re": np.real(arr).tolist(), "im": np.imag(arr).tolist()}
            return arr.tolist()

        return {
            "triple": {"re": self.triple.real, "im": self.triple.imag},
            "n": enc(self.n), "nn": enc(self.nn), "first": enc(self.first),
            "second_pair": enc(self.second_pair), "cov": enc(self.cov),
            "first_err": enc(self.first_err), "second_pair_err": enc(self.second_pair_err),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MomentSet":
        def dec(v):
            if v is None:
                return None
            if isinstance(v, dict):
                return np.asarray(v["re"]) + 1j * np.asarray(v["im"])
            return np.asarray(v)

        t = d["triple"]
        return cls(complex(t["re"], t["im"]), dec(d["n"]), dec(d["nn"]), dec(d.get("first")),
                   dec(d.get("second_pair")), dec(d.get("cov")), dec(d.get("first_err")),
                   dec(d.get("second_pair_err")))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class WitnessResult:
    w: float
    sigma_stat: float
    sigma_sys_low: float
    n_tot: float
    clipped: bool = False
    moments: Optional[MomentSet] = field(default=None, repr=False)

    @property
    def total_uncertainty(self) -> float:
        return self.sigma_stat + self.sigma_sys_low

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "moments"}
        d["total_uncertainty"] = self.total_uncertainty
        return d


def _clip(values: np.ndarray, errs: Optional[np.ndarray], name: str) -> tuple[np.ndarray, bool]:
    neg = values < 0
    if not neg.any():
        return values, False
    if errs is None or np.any(-values[neg] > errs[neg]):
        raise ValueError(f"{name} has negative entries beyond one standard error: {values}")
    return np.where(neg, 0.0, values), True


def compute_witness(m: MomentSet) -> WitnessResult:
    errs = m.std_err
    n, c1 = _clip(m.n, None if errs is None else errs[1:4], "n")
    nn, c2 = _clip(m.nn, None if errs is None else errs[4:7], "nn")
    w = abs(m.triple) - float(np.sum(np.sqrt(n * nn)))
    sigma = 0.0
    if m.cov is not None:
        clipped_m = replace(m, n=np.where(n > 0, n, m.n), nn=np.where(nn > 0, nn, m.nn))
        if np.all(clipped_m.n > 0) and np.all(clipped_m.nn > 0):
            sigma = math.sqrt(max(witness_variance(clipped_m), 0.0))
        else:
            sigma = math.sqrt(max(m.cov[0, 0], 0.0))
    return WitnessResult(w, sigma, 0.0, float(np.sum(n)), c1 or c2, m)


def witness_gradient(m: MomentSet) -> np.ndarray:
    x, y = m.n, m.nn
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("delta method needs strictly positive <N_i> and <N_j N_k>")
    return np.concatenate(([1.0], -0.5 * np.sqrt(y / x), -0.5 * np.sqrt(x / y)))


def witness_variance(m: MomentSet) -> float:
    """First-order propagated variance of W from the moment covariance."""
    if m.cov is None:
        raise ValueError("moment covariance is required")
    c = m.cov
    if np.linalg.eigvalsh(0.5 * (c + c.T))[0] < -1e-9 * max(np.abs(c).max(), 1e-300):
        raise ValueError("moment covariance is not positive semidefinite")
    x, y = m.n, m.nn
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("delta method needs strictly positive <N_i> and <N_j N_k>")
    iz, ix, iy = 0, np.arange(1, 4), np.arange(4, 7)
    var = c[iz, iz]
    for i in range(3):
        var -= math.sqrt(x[i] / y[i]) * c[iz, iy[i]] + math.sqrt(y[i] / x[i]) * c[iz, ix[i]]
    for i in range(3):
        for j in range(3):
            s = math.sqrt(x[i] * x[j] * y[i] * y[j])
            var += s * (c[ix[i], ix[j]] / (4 * x[i] * x[j])
                        + c[ix[i], iy[j]] / (4 * x[i] * y[j])
                        + c[ix[j], iy[i]] / (4 * x[j] * y[i])
                        + c[iy[i], iy[j]] / (4 * y[i] * y[j]))
    return float(var)


def witness_from_stats(stats: np.ndarray) -> np.ndarray:
    """W for rows of (Z, X1..3, Y1..3); negative moments are clipped at zero."""
    s = np.atleast_2d(stats)
    x = np.clip(s[:, 1:4], 0.0, None)
    y = np.clip(s[:, 4:7], 0.0, None)
    return s[:, 0] - np.sqrt(x * y).sum(axis=1)


def bootstrap_witness_variance(samples: np.ndarray, n_resamples: int = 10_000,
                               seed: int = 0, chunk: int = 1000) -> float:
    """Variance of W over resamples of per-segment statistics (rows = segments)."""
    samples = np.asarray(samples, float)
    if samples.ndim != 2 or samples.shape[1] != N_STATS:
        raise ValueError("samples must be (n_segments, 7)")
    rng = np.random.default_rng(seed)
    n = samples.shape[0]
    ws = []
    for start in range(0, n_resamples, chunk):
        k = min(chunk, n_resamples - start)
        idx = rng.integers(0, n, size=(k, n))
        means = samples[idx].mean(axis=1)
        ws.append(witness_from_stats(means))
    return float(np.var(np.concatenate(ws), ddof=1))


def moments_from_samples(samples: np.ndarray, **extra) -> MomentSet:
    """MomentSet whose cov is the covariance of the sample means."""
    samples = np.asarray(samples, float)
    mean = samples.mean(axis=0)
    cov = np.cov(samples, rowvar=False) / samples.shape[0]
    return MomentSet(mean[0], mean[1:4], mean[4:7], cov=cov, **extra)


@dataclass(frozen=True)
class ScalingFit:
    b: float
    c: float
    residuals: np.ndarray

    @property
    def n_peak(self) -> float:
        return (self.b / (2 * self.c)) ** 2

    @property
    def w_max(self) -> float:
        return self.b ** 2 / (4 * self.c)

    def predict(self, n_tot) -> np.ndarray:
        n_tot = np.asarray(n_tot, float)
        return self.b * np.sqrt(n_tot) - self.c * n_tot


def scaling_fit(points: Sequence[tuple[float, float]]) -> ScalingFit:
    """Least squares of W = B sqrt(N) - C N."""
    pts = np.asarray(points, float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("need at least three (n_tot, w) points")
    n_tot, w = pts[:, 0], pts[:, 1]
    if np.any(n_tot <= 0):
        raise ValueError("n_tot must be positive")
    design = np.column_stack([np.sqrt(n_tot), -n_tot])
    if np.linalg.matrix_rank(design) < 2:
        raise ValueError("degenerate design: need at least two distinct n_tot values")
    coef, *_ = np.linalg.lstsq(design, w, rcond=None)
    b, c = float(coef[0]), float(coef[1])
    return ScalingFit(b, c, w - design @ coef)


@dataclass(frozen=True)
class GaussianCheck:
    prediction: complex
    sigma: float
    z_score: float


def gaussian_triple_prediction(m: MomentSet) -> GaussianCheck:
    """Third moment implied by a Gaussian state with the measured first and second moments."""
    if m.first is None or m.second_pair is None:
        raise ValueError("first and pairwise second moments are required")
    a = m.first
    p = m.second_pair  # p[i] = <A_j A_k>
    pred = a[0] * p[0] + a[1] * p[1] + a[2] * p[2] - 2 * a[0] * a[1] * a[2]
    var = 0.0
    if m.first_err is not None and m.second_pair_err is not None:
        ea, ep = m.first_err, m.second_pair_err
        for i in range(3):
            j, k = [x for x in range(3) if x != i]
            d_a = p[i] - 2 * a[j] * a[k]
            var += abs(d_a) ** 2 * ea[i] ** 2 + abs(a[i]) ** 2 * ep[i] ** 2
    sigma = math.sqrt(var)
    z_err = 0.0 if m.cov is None else math.sqrt(max(m.cov[0, 0], 0.0))
    denom = math.sqrt(sigma ** 2 + z_err ** 2)
    z = (abs(m.triple) - abs(pred)) / denom if denom > 0 else math.inf
    return GaussianCheck(complex(pred), sigma, z)


def systematic_bound(w: WitnessResult, gain_bias: Sequence[float] = (0.0, 0.0, 0.0),
                     drift: Sequence[float] = (0.0, 0.0, 0.0)) -> WitnessResult:
    """Lower-bound W under overestimated gains and add the drift term linearly.

    gain_bias[i] is the relative amount by which gain i may be overestimated;
    drift[i] is the relative gain standard deviation over the run.
    """
    bias = np.asarray(gain_bias, float)
    if np.any(bias < 0):
        raise ValueError("gain bias must be non-negative")
    if w.moments is None:
        raise ValueError("witness result does not carry its moments")
    low = compute_witness(w.moments.scaled(1.0 + bias))
    delta_w = 0.5 * float(np.sum(drift))
    return WitnessResult(low.w, w.sigma_stat, abs(low.w) * delta_w, low.n_tot, low.clipped, low.moments)


# reference data: measured output-field moments at the operating point
TABLE_TRIPLE = 2.680e-2
TABLE_TRIPLE_ERR = 0.099e-2
TABLE_N = np.array([1.018e-2, 1.250e-2, 0.713e-2])
TABLE_N_ERR = np.array([0.082e-2, 0.100e-2, 0.067e-2])
TABLE_NN = np.array([1.48e-3, 0.80e-3, 2.49e-3])
TABLE_NN_ERR = np.array([0.22e-3, 0.21e-3, 0.45e-3])
TABLE_W = 1.554e-2
TABLE_W_ERR = 0.103e-2
TABLE_FIRST = np.array([4.35e-5, -3.20e-5, -4.97e-5])
TABLE_FIRST_ERR = np.array([6.5e-5, 4.3e-5, 3.6e-5])
# <A2A3>, <A1A3>, <A1A2>
TABLE_SECOND_PAIR = np.array([4.57e-3, 4.59e-3, 6.54e-3])
TABLE_SECOND_PAIR_ERR = np.array([0.20e-3, 0.18e-3, 0.24e-3])
DRIFT_DELTA_W = 0.035


def reference_moments() -> MomentSet:
    """Measured moments with a diagonal covariance built from the quoted errors."""
    err = np.concatenate(([TABLE_TRIPLE_ERR], TABLE_N_ERR, TABLE_NN_ERR))
    return MomentSet(TABLE_TRIPLE, TABLE_N, TABLE_NN, TABLE_FIRST, TABLE_SECOND_PAIR,
                     np.diag(err ** 2), TABLE_FIRST_ERR, TABLE_SECOND_PAIR_ERR)
