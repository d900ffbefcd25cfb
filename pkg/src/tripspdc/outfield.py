"""Filtered output-field correlators in the weak-drive steady state.

Each multi-time kernel is a sum of exponentials exp(sum_l c_l t_l) with
sum_l c_l = 0, integrated against f(t_1)...f(t_d) over t_1 < ... < t_d. Such an
integral factorizes into a chain of leaky cumulative integrals, so the ordered
simplex is swept in O(n) per exponential term instead of O(n^d). The nested
trapezoid rule is refined once and Richardson-extrapolated.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

from .device import DeviceModel, gamma_total
from .pulses import TemporalMode
from .steadystate import _check_lambda

DEGENERACY_TOL = 1e-6
DEGENERACY_STEP = 1e-4


@dataclass(frozen=True)
class OrderedSimplexGrid:
    t_start: float
    t_max: float
    n_points: int
    dimension: int

    def __post_init__(self):
        if self.dimension not in (2, 3, 4):
            raise ValueError("only 2-, 3- and 4-time domains are used")
        if self.n_points < 3 or not self.t_max > self.t_start:
            raise ValueError("grid needs at least 3 points on a positive span")

    @property
    def step(self) -> float:
        return (self.t_max - self.t_start) / (self.n_points - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_max, self.n_points)

    def refined(self) -> "OrderedSimplexGrid":
        return OrderedSimplexGrid(self.t_start, self.t_max, 2 * self.n_points - 1, self.dimension)


@dataclass(frozen=True)
class ExpTerm:
    """coef * exp(sum_l rates[l] * t_l) on the ordered domain t_1 < t_2 < ..."""

    coef: complex
    rates: tuple[float, ...]

    def gaps(self) -> np.ndarray:
        """Decay constants S_m of the successive gaps t_{m+1} - t_m."""
        s = np.cumsum(self.rates)
        if abs(s[-1]) > 1e-9 * max(1.0, np.abs(self.rates).max()):
            raise ValueError("kernel term is not time-translation invariant")
        return s[:-1]


@dataclass(frozen=True)
class OutputCorrelators:
    triple: complex
    n_out: np.ndarray
    nn_out: np.ndarray


def _nested(weights: np.ndarray, h: float, gaps: np.ndarray) -> float:
    """Trapezoid estimate of the ordered integral of prod f(t_l) exp(-sum S_m (t_{m+1}-t_m))."""
    g = weights.astype(complex)
    for s in gaps:
        decay = math.exp(-s * h)
        b = 0.5 * h * (decay * g[:-1] + g[1:])
        # G[n+1] = decay * G[n] + b[n], G[0] = 0
        acc = lfilter([1.0], [1.0, -decay], b)
        g = weights * np.concatenate(([0.0], acc))
    total = 0.5 * h * (g[0] + g[-1]) + h * g[1:-1].sum()
    return complex(total)


def ordered_integral(terms: Iterable[ExpTerm], f: TemporalMode, n_points: int | None = None,
                     rtol: float = 1e-6, max_refine: int = 6) -> complex:
    """Integral of a sum of exponential kernels over the ordered simplex on the support of f."""
    terms = list(terms)
    if not terms:
        return 0j
    lo, hi = f.support
    fastest = max(float(np.abs(t.gaps()).max(initial=0.0)) for t in terms)
    if n_points is None:
        # resolve the fastest exponential and the filter shape
        n_points = int(max(64, 8 * fastest * (hi - lo), 16 * (hi - lo) / max(f.width, 1e-9))) + 1
    grid = OrderedSimplexGrid(lo, hi, n_points, len(terms[0].rates))

    def estimate(gr: OrderedSimplexGrid) -> complex:
        w = f.evaluate(gr.nodes)
        if f.shape.value == "boxcar":
            w[-1] = w[0]  # closed support for the continuous integral
        return sum(t.coef * _nested(w, gr.step, t.gaps()) for t in terms)

    coarse = estimate(grid)
    best = coarse
    for _ in range(max_refine):
        grid = grid.refined()
        fine = estimate(grid)
        best = (4.0 * fine - coarse) / 3.0
        if abs(fine - coarse) <= rtol * max(abs(best), 1e-300):
            return best
        coarse = fine
    return best


def _complement(i: int) -> tuple[int, int]:
    j, k = [m for m in range(3) if m != i]
    return j, k


def _drive_factor(model: DeviceModel) -> float:
    return (2.0 * model.g / gamma_total(model)) ** 2


# ---------------------------------------------------------------------------
# two-time


def two_time_correlator(model: DeviceModel, i: int, dt_sep) -> np.ndarray:
    """<a_i^+(t + d) a_i(t)>_ss for d >= 0, lowest order in g."""
    _check_lambda(model)
    d = np.asarray(dt_sep, dtype=float)
    if np.any(d < 0):
        raise ValueError("separation must be non-negative")
    gam = model.gammas
    gt = gamma_total(model)
    j, k = _complement(i)
    r = _drive_factor(model)
    den = gam[j] + gam[k] - gam[i]
    base = (gt / gam[i]) * np.exp(-gam[i] * d / 2)
    if abs(den) < DEGENERACY_TOL * gt:
        cross = gt * (d / 2) * np.exp(-gam[i] * d / 2)
    else:
        cross = gt / den * (np.exp(-gam[i] * d / 2) - np.exp(-(gam[j] + gam[k]) * d / 2))
    return r * (base + cross)


def _mean_photon_terms(model: DeviceModel, i: int) -> list[ExpTerm]:
    gt = gamma_total(model)
    r = _drive_factor(model)
    j, k = _complement(i)

    def build(gam):
        den = gam[j] + gam[k] - gam[i]
        a, b = gam[i] / 2, (gam[j] + gam[k]) / 2
        return [ExpTerm(r * (gt / gam[i] + gt / den), (a, -a)),
                ExpTerm(-r * gt / den, (b, -b))]

    gam = model.gammas
    den = gam[j] + gam[k] - gam[i]
    if abs(den) >= DEGENERACY_TOL * gt:
        return build(gam)
    step = np.zeros(3)
    step[i] = DEGENERACY_STEP * gt
    return [ExpTerm(0.5 * t.coef, t.rates) for t in build(gam + step) + build(gam - step)]


def output_mean_photon(model: DeviceModel, mode_index: int, f: TemporalMode, **quad) -> float:
    """<N_i> = 2 gamma_ext,i * ordered 2-time integral of f f <a^+ a>."""
    _check_lambda(model)
    if model.g == 0:
        return 0.0
    val = ordered_integral(_mean_photon_terms(model, mode_index), f, **quad)
    return float(2.0 * model.modes[mode_index].gamma_ext * val.real)


# ---------------------------------------------------------------------------
# three-time


def _triple_terms(model: DeviceModel) -> list[ExpTerm]:
    gam = model.gammas
    gt = gamma_total(model)
    pref = np.sqrt(np.prod(model.gamma_ext)) * (-2j * model.g / gt)
    out = []
    for i, j, k in itertools.permutations(range(3)):
        # mode i at the earliest time, then j, then k
        s1 = (gam[j] + gam[k]) / 2
        s2 = gam[k] / 2
        out.append(ExpTerm(pref, (s1, s2 - s1, -s2)))
    return out


def output_triple(model: DeviceModel, f: TemporalMode, **quad) -> complex:
    """<A_1 A_2 A_3>; purely imaginary with real f."""
    _check_lambda(model)
    if model.g == 0:
        return 0j
    val = ordered_integral(_triple_terms(model), f, **quad)
    return complex(0.0, val.imag)


# ---------------------------------------------------------------------------
# four-time
#
# Kernels are written for the pair (b, c) with complement a. Each exponent is
# stored as three rows (multipliers of gamma_a, gamma_b, gamma_c) over t1..t4.

_Z = (0, 0, 0, 0)

# populations |111><111| and |0bc><0bc| propagated freely
_K0 = [
    (_Z, (1, 0, -.5, -.5), (.5, -.5, 0, 0)),
    (_Z, (1, -.5, 0, -.5), (.5, 0, -.5, 0)),
    (_Z, (.5, 0, 0, -.5), (1, -.5, -.5, 0)),
    (_Z, (1, -.5, -.5, 0), (.5, 0, 0, -.5)),
    (_Z, (.5, 0, -.5, 0), (1, -.5, 0, -.5)),
    (_Z, (.5, -.5, 0, 0), (1, 0, -.5, -.5)),
]

# three-photon coherence with one first-order propagator on the first gap;
# entries are (sign, a, b, c) for exp(0.5 * [...])
_A12 = (1, -1, 0, 0)
_K1 = [
    (+1, _A12, (1, 1, -1, -1), _Z),
    (-1, _Z, (2, 0, -1, -1), (1, -1, 0, 0)),
    (-1, _Z, (2, -1, 0, -1), (1, 0, -1, 0)),
    (+1, _A12, (0, 1, 0, -1), (1, 0, -1, 0)),
    (-1, _Z, (1, 0, 0, -1), (2, -1, -1, 0)),
    (+1, _A12, (1, 0, 0, -1), (0, 1, -1, 0)),
    (-1, _Z, (2, -1, -1, 0), (1, 0, 0, -1)),
    (+1, _A12, (0, 1, -1, 0), (1, 0, 0, -1)),
    (-1, _Z, (1, 0, -1, 0), (2, -1, 0, -1)),
    (+1, _A12, (1, 0, -1, 0), (0, 1, 0, -1)),
    (-1, _Z, (1, -1, 0, 0), (2, 0, -1, -1)),
    (+1, _A12, _Z, (1, 1, -1, -1)),
]


def _gap_term(coef: complex, s1: float, s2: float, s3: float) -> ExpTerm:
    """Term exp(-s1 (t2-t1) - s2 (t3-t2) - s3 (t4-t3))."""
    return ExpTerm(coef, (s1, s2 - s1, s3 - s2, -s3))


def _middle_gap_terms(ga: float, gb: float, gc: float, r: float, gt: float) -> list[ExpTerm]:
    """Three-photon coherence with the first-order propagator on the middle gap.

    The two earliest events remove the b and c excitations from one side of
    the coherence, the drive then re-creates them on the other side, and the
    two latest events remove them again.
    """
    den = gb + gc - ga
    out = []
    for s1 in ((ga + gc) / 2, (ga + gb) / 2):
        for sign, s2 in ((+1.0, ga / 2), (-1.0, (gb + gc) / 2)):
            for s3 in (gc / 2, gb / 2):
                out.append(_gap_term(2.0 * r * gt / den * sign, s1, s2, s3))
    return out


def number_number_terms(gam_abc: np.ndarray, r: float, gt: float) -> list[ExpTerm]:
    """Exponential expansion of the summed four-time kernels for the pair (b, c)."""
    ga, gb, gc = (float(x) for x in gam_abc)
    vec = np.array([ga, gb, gc])
    den = ga - gb - gc
    out = []
    for rows in _K0:
        out.append(ExpTerm(4.0 * r * gt / (gb + gc), tuple(vec @ np.array(rows, float))))
    for sign, *rows in _K1:
        out.append(ExpTerm(-4.0 * r * gt / den * sign, tuple(0.5 * vec @ np.array(rows, float))))
    out.extend(_middle_gap_terms(ga, gb, gc, r, gt))
    return out


def _nn_terms(model: DeviceModel, pair: tuple[int, int]) -> list[ExpTerm]:
    j, k = pair
    if j == k or not {j, k} <= {0, 1, 2}:
        raise ValueError("pair must name two distinct modes")
    m = 3 - j - k
    gam = model.gammas
    gt = gamma_total(model)
    r = _drive_factor(model)
    abc = np.array([gam[m], gam[j], gam[k]])
    den = abc[0] - abc[1] - abc[2]
    if abs(den) >= DEGENERACY_TOL * gt:
        return number_number_terms(abc, r, gt)
    step = np.array([DEGENERACY_STEP * gt, 0.0, 0.0])
    both = number_number_terms(abc + step, r, gt) + number_number_terms(abc - step, r, gt)
    return [ExpTerm(0.5 * t.coef, t.rates) for t in both]


def number_number_kernel(model: DeviceModel, pair: tuple[int, int], t: Sequence[float]) -> float:
    """Summed kernel at one ordered time tuple t1 < t2 < t3 < t4 (diagnostics and tests)."""
    t = np.asarray(t, float)
    return float(sum((term.coef * np.exp(np.dot(term.rates, t))).real
                     for term in _nn_terms(model, pair)))


def output_number_number(model: DeviceModel, pair: tuple[int, int], f: TemporalMode,
                         **quad) -> float:
    """<N_j N_k> of the filtered outputs of two distinct modes."""
    _check_lambda(model)
    if model.g == 0:
        return 0.0
    j, k = pair
    val = ordered_integral(_nn_terms(model, pair), f, **quad)
    return float(model.modes[j].gamma_ext * model.modes[k].gamma_ext * val.real)


def output_correlators(model: DeviceModel, f: TemporalMode, **quad) -> OutputCorrelators:
    """All witness ingredients; nn_out[i] pairs the two modes other than i."""
    n = np.array([output_mean_photon(model, i, f, **quad) for i in range(3)])
    nn = np.array([output_number_number(model, _complement(i), f, **quad) for i in range(3)])
    return OutputCorrelators(output_triple(model, f, **quad), n, nn)
