"""Filtered output modes as virtual cavities driven by the device.

Each output temporal mode v_j(t) is represented by a virtual cavity a_vj with
time-dependent coupling g_j(t) = -v_j(t) / sqrt(F_j(t)), F_j(t) = int_0^t |v_j|^2.
The six-mode cascade is unravelled into Monte-Carlo wavefunction trajectories
(waiting-time method); a dense master-equation integrator on the same
generators serves as a deterministic reference at small truncations.

Trajectories that have not jumped yet are identical, so they share one state
column. A column is split off whenever one of its members jumps, which keeps
the cost proportional to the number of jumps rather than the number of
trajectories while leaving every trajectory's random stream untouched.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .device import DeviceModel, build_hamiltonian
from .fock import HilbertSpace, Operator, StateVector, annihilation
from .pulses import TemporalMode
from .steadystate import liouvillian_steady_state
from .witness import MomentSet

log = logging.getLogger(__name__)

TOP_LEVEL_MAX = 1e-3
JUMP_TIME_TOL = 1e-8
WARMUP_LIFETIMES = 10.0
EDGE_GRADING = 10  # first cell of each filter split geometrically into this many steps
_FINE_POINTS = 20001


class TruncationError(RuntimeError):
    """Population in the highest retained Fock level exceeds the limit."""


# ---------------------------------------------------------------------------
# couplings


@dataclass(frozen=True)
class Coupling:
    """g_v(t) for one wavepacket, with F clamped below at the first-cell mass."""

    mode: TemporalMode
    f_min: float
    _t: np.ndarray = field(repr=False)
    _F: np.ndarray = field(repr=False)

    @property
    def support(self) -> tuple[float, float]:
        return self.mode.support

    def cumulative(self, t) -> np.ndarray:
        return np.interp(t, self._t, self._F, left=0.0, right=self._F[-1])

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        lo, hi = self.support
        inside = (t >= lo) & (t <= hi)
        # boxcar support is half-open; evaluate the closing edge from inside
        tc = np.clip(t, lo, hi - 1e-12 * (hi - lo))
        v = self.mode.evaluate(tc)
        F = np.maximum(self.cumulative(t), self.f_min)
        return np.where(inside, -v / np.sqrt(F), 0.0)


def gv_from_wavepacket(v: TemporalMode, first_cell: Optional[float] = None,
                       n_fine: int = _FINE_POINTS) -> Coupling:
    """Coupling of the virtual cavity that absorbs the wavepacket v.

    first_cell sets the regularization floor F_min = F(t0 + first_cell); it
    defaults to the wavepacket's own sample spacing.
    """
    lo, hi = v.support
    cell = v.dt if first_cell is None else float(first_cell)
    t = np.linspace(lo, hi, n_fine)
    y = v.evaluate(np.clip(t, lo, hi - 1e-12 * (hi - lo))) ** 2
    F = np.concatenate(([0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))))
    if abs(F[-1] - 1.0) > 1e-6:
        raise ValueError(f"wavepacket is not normalized: int |v|^2 = {F[-1]:.8f}")
    f_min = float(np.interp(lo + cell, t, F))
    if f_min <= 0:
        raise ValueError("regularization cell carries no weight")
    return Coupling(v, f_min, t, F)


# ---------------------------------------------------------------------------
# system description


@dataclass(frozen=True)
class CascadeSystem:
    model: DeviceModel
    physical_space: HilbertSpace
    virtual_space: HilbertSpace
    wavepackets: tuple[TemporalMode, TemporalMode, TemporalMode]
    t_grid: np.ndarray
    warmup: float = 0.0

    def __post_init__(self):
        if self.physical_space.n_modes != 3 or self.virtual_space.n_modes != 3:
            raise ValueError("cascade needs three physical and three virtual modes")
        if len(self.wavepackets) != 3:
            raise ValueError("need one wavepacket per mode")
        t = np.asarray(self.t_grid, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("time grid needs at least two points")
        steps = np.diff(t)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12) or steps[0] <= 0:
            raise ValueError("time grid must be uniform and increasing")
        if not -1e-9 <= self.warmup <= t[-1] - t[0] + 1e-9:
            raise ValueError("warmup longer than the time grid")
        for v in self.wavepackets:
            lo, hi = v.support
            if lo < t[0] - 1e-9 or hi > t[-1] + 1e-9:
                raise ValueError("time grid does not cover the wavepacket support")
            if lo < t[0] + self.warmup - 1e-9:
                raise ValueError("wavepacket starts inside the warmup")
        object.__setattr__(self, "wavepackets", tuple(self.wavepackets))
        object.__setattr__(self, "t_grid", t)

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    @property
    def space(self) -> HilbertSpace:
        return HilbertSpace(self.physical_space.mode_dims + self.virtual_space.mode_dims)

    @property
    def window_start(self) -> float:
        return float(self.t_grid[0] + self.warmup)

    def couplings(self) -> list[Coupling]:
        return [gv_from_wavepacket(v, self.dt * 2.0 ** -EDGE_GRADING) for v in self.wavepackets]

    def window_nodes(self) -> np.ndarray:
        """Step boundaries after the warmup, graded towards each filter's leading edge.

        g_v diverges like 1/sqrt(t - t0) for filters that start abruptly; halving
        the step repeatedly into that edge keeps g^2 h bounded and shrinks the
        regularized cell to dt / 2**EDGE_GRADING.
        """
        n_warm = int(round(self.warmup / self.dt))
        nodes = [self.t_grid[n_warm:]]
        frac = 2.0 ** -np.arange(1, EDGE_GRADING + 1)
        for v in self.wavepackets:
            nodes.append(v.support[0] + self.dt * frac)
        t = np.unique(np.concatenate(nodes))
        keep = np.concatenate(([True], np.diff(t) > 1e-9 * self.dt * 2.0 ** -EDGE_GRADING))
        return t[keep]

    def manifest(self) -> dict:
        m = self.model
        return {
            "gamma_ext": m.gamma_ext.tolist(),
            "gamma_int": [x.gamma_int for x in m.modes],
            "g": m.g,
            "kerr": m.kerr.tolist(),
            "pump_detuning": m.pump_detuning,
            "physical_dims": list(self.physical_space.mode_dims),
            "virtual_dims": list(self.virtual_space.mode_dims),
            "filters": [{"shape": v.shape.value, "width": v.width, "support": list(v.support),
                         "window": v.window} for v in self.wavepackets],
            "dt": self.dt,
            "t_end": float(self.t_grid[-1]),
            "warmup": self.warmup,
        }


def default_warmup(model: DeviceModel) -> float:
    return WARMUP_LIFETIMES / float(np.min(model.gammas))


def _snap(x: float, dt: float) -> float:
    return dt * math.ceil(x / dt - 1e-9)


def make_system(model: DeviceModel, filters: TemporalMode | Sequence[TemporalMode],
                dims: Sequence[int] = (4, 4, 4), virtual_dims: Optional[Sequence[int]] = None,
                dt: Optional[float] = None, warmup: Optional[float] = None) -> CascadeSystem:
    """Cascade whose filters start right after a warmup on a uniform grid from 0."""
    if isinstance(filters, TemporalMode):
        filters = [filters] * 3
    filters = list(filters)
    if dt is None:
        dt = min(0.005, min(v.duration for v in filters) / 64)
    virtual_dims = tuple(dims) if virtual_dims is None else tuple(virtual_dims)
    w = default_warmup(model) if warmup is None else float(warmup)
    w = _snap(w, dt) if w > 0 else 0.0
    start = min(v.support[0] for v in filters)
    shifted = [v.shifted(w - start) for v in filters]
    t_end = _snap(max(v.support[1] for v in shifted), dt)
    n = int(round(t_end / dt)) + 1
    return CascadeSystem(model, HilbertSpace(tuple(dims)), HilbertSpace(virtual_dims),
                         tuple(shifted), dt * np.arange(n), w)


def steady_state_windowing(sys: CascadeSystem, warmup: Optional[float] = None) -> CascadeSystem:
    """Delay the filters by a warmup during which the couplings stay zero."""
    w = default_warmup(sys.model) if warmup is None else float(warmup)
    if w < 0:
        raise ValueError("warmup must be non-negative")
    dt = sys.dt
    w = _snap(w, dt) if w > 0 else 0.0
    shift = sys.t_grid[0] + w - min(v.support[0] for v in sys.wavepackets)
    shifted = tuple(v.shifted(shift) for v in sys.wavepackets)
    t_end = max(float(sys.t_grid[-1]), _snap(max(v.support[1] for v in shifted), dt))
    n = int(round((t_end - sys.t_grid[0]) / dt)) + 1
    return replace(sys, wavepackets=shifted, t_grid=sys.t_grid[0] + dt * np.arange(n), warmup=w)


# ---------------------------------------------------------------------------
# generators


@dataclass(frozen=True)
class CascadeGenerators:
    h_eff: Operator
    l_eff: list[Operator]
    l_int: list[Operator]


@dataclass(frozen=True)
class _Pieces:
    """H_nh(t) = a0 + sum_j g_j(t) b_j + g_j(t)^2 c_j and L_j(t) = s_j + g_j(t) v_j."""

    space: HilbertSpace
    h_r: sp.csr_matrix
    a0: sp.csr_matrix
    b: list
    c: list
    jump_static: list  # (operator, index of time-dependent partner or -1)
    jump_virtual: list


def _pieces(model: DeviceModel, phys: HilbertSpace, virt: Optional[HilbertSpace]) -> _Pieces:
    space = phys if virt is None else HilbertSpace(phys.mode_dims + virt.mode_dims)
    h_phys = build_hamiltonian(model, phys).data
    if virt is None:
        h_r = h_phys
    else:
        h_r = sp.kron(h_phys, sp.identity(virt.total_dim, dtype=complex), format="csr")
    a = [annihilation(space, i).data for i in range(3)]
    a0 = h_r.copy()
    statics, partners, b, c, virtual = [], [], [], [], []
    for j, mode in enumerate(model.modes):
        a0 = a0 - 0.5j * mode.gamma * (a[j].conj().T @ a[j])
        statics.append((math.sqrt(mode.gamma_ext) * a[j], j if virt is not None else -1))
        if mode.gamma_int > 0:
            statics.append((math.sqrt(mode.gamma_int) * a[j], -1))
        if virt is not None:
            av = annihilation(space, 3 + j).data
            b.append((-1j * math.sqrt(mode.gamma_ext) * (av.conj().T @ a[j])).tocsr())
            c.append((-0.5j * (av.conj().T @ av)).tocsr())
            virtual.append(av)
    return _Pieces(space, h_r.tocsr(), a0.tocsr(), b, c, statics, virtual)


def build_cascade_generators(sys: CascadeSystem, t: float) -> CascadeGenerators:
    """Effective Hamiltonian and collapse operators at time t.

    H_eff = H_r + sum_j (i sqrt(gamma_ext,j) / 2) [g_j a_j^+ a_vj - g_j^* a_vj^+ a_j]
    L_eff,j = sqrt(gamma_ext,j) a_j + g_j a_vj;  L_int,j = sqrt(gamma_int,j) a_j.
    With this sign the combined drift carries the physical field into the
    virtual cavity and not back.
    """
    lo, hi = sys.t_grid[0], sys.t_grid[-1]
    if not lo - 1e-12 <= t <= hi + 1e-12:
        raise ValueError(f"t = {t} outside the time grid [{lo}, {hi}]")
    p = _pieces(sys.model, sys.physical_space, sys.virtual_space)
    space = p.space
    gs = [float(cpl(t)) for cpl in sys.couplings()]
    h = p.h_r.copy()
    l_eff, l_int = [], []
    for j, mode in enumerate(sys.model.modes):
        a = annihilation(space, j).data
        av = p.jump_virtual[j]
        x = gs[j] * (a.conj().T @ av)
        h = h + 0.5j * math.sqrt(mode.gamma_ext) * (x - x.conj().T)
        l_eff.append(Operator(space, math.sqrt(mode.gamma_ext) * a + gs[j] * av))
        l_int.append(Operator(space, math.sqrt(mode.gamma_int) * a))
    return CascadeGenerators(Operator(space, h.tocsr()), l_eff, l_int)


class _Drift:
    """Assembles H_nh(t) on one fixed sparsity pattern."""

    def __init__(self, p: _Pieces, couplings: Sequence[Coupling]):
        mats = [p.a0] + list(p.b) + list(p.c)
        pattern = sum(abs(m) for m in mats).tocsr()
        pattern.sort_indices()
        n = pattern.shape[0]
        self.indptr, self.indices, self.shape = pattern.indptr, pattern.indices, pattern.shape
        keys = np.repeat(np.arange(n), np.diff(pattern.indptr)) * n + pattern.indices
        aligned = []
        for m in mats:
            coo = m.tocoo()
            d = np.zeros(len(keys), complex)
            np.add.at(d, np.searchsorted(keys, coo.row.astype(np.int64) * n + coo.col), coo.data)
            aligned.append(d)
        nc = len(couplings)
        self.d0 = aligned[0]
        self.db = np.array(aligned[1:1 + nc]).reshape(nc, len(keys))
        self.dc = np.array(aligned[1 + nc:]).reshape(nc, len(keys))
        self.couplings = list(couplings)
        self.p = p

    def g(self, t: float) -> np.ndarray:
        return np.array([float(c(t)) for c in self.couplings])

    def matrix(self, t: float) -> sp.csr_matrix:
        data = self.d0
        if self.couplings:
            g = self.g(t)
            if np.any(g):
                data = data + g @ self.db + (g * g) @ self.dc
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def rk4(self, psi: np.ndarray, t: float, h: float) -> np.ndarray:
        m0, mh, m1 = self.matrix(t), self.matrix(t + h / 2), self.matrix(t + h)
        k1 = -1j * (m0 @ psi)
        k2 = -1j * (mh @ (psi + 0.5 * h * k1))
        k3 = -1j * (mh @ (psi + 0.5 * h * k2))
        k4 = -1j * (m1 @ (psi + h * k3))
        return psi + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)

    def jump_ops(self, t: float) -> list[sp.csr_matrix]:
        g = self.g(t) if self.couplings else None
        out = []
        for op, partner in self.p.jump_static:
            if partner >= 0 and g[partner] != 0.0:
                out.append(op + g[partner] * self.p.jump_virtual[partner])
            else:
                out.append(op)
        return out


# ---------------------------------------------------------------------------
# trajectory engine


class _Ensemble:
    """State columns shared by trajectories that have not diverged yet."""

    def __init__(self, psi: np.ndarray, members: list[list[int]], rngs: list, thresholds: np.ndarray):
        self.cap = max(16, 2 * psi.shape[1])
        self.psi = np.zeros((psi.shape[0], self.cap), complex)
        self.psi[:, :psi.shape[1]] = psi
        self.ncol = psi.shape[1]
        self.members = [list(m) for m in members]
        self.rngs = rngs
        self.thr = thresholds
        self.n_jumps = np.zeros(len(rngs), dtype=np.int64)
        self.max_norm_rise = 0.0
        self.max_jump_norm_err = 0.0

    def max_threshold(self, c: int) -> float:
        m = self.members[c]
        return float(self.thr[m].max()) if m else -1.0

    def add_column(self, v: np.ndarray, members: list[int]) -> None:
        if self.ncol == self.cap:
            self.cap *= 2
            grown = np.zeros((self.psi.shape[0], self.cap), complex)
            grown[:, :self.ncol] = self.psi[:, :self.ncol]
            self.psi = grown
        self.psi[:, self.ncol] = v
        self.members.append(members)
        self.ncol += 1

    def merge(self, tol: float = 1e-12) -> int:
        """Fold columns that hold the same ray into one and drop empty columns.

        A member's waiting-time condition |psi_c|^2 < r is carried over to the
        surviving column r' as |psi_r|^2 < r * n_r / n_c, so every trajectory
        keeps exactly the same jump record.
        """
        live = [c for c in range(self.ncol) if self.members[c]]
        reps: list[int] = []
        merged = 0
        for c in live:
            v = self.psi[:, c]
            nc = np.vdot(v, v).real
            for r in reps:
                u = self.psi[:, r]
                nr = np.vdot(u, u).real
                if 1.0 - abs(np.vdot(u, v)) ** 2 / (nr * nc) < tol:
                    m = self.members[c]
                    self.thr[m] *= nr / nc
                    self.members[r].extend(m)
                    self.members[c] = []
                    merged += 1
                    break
            else:
                reps.append(c)
        self.psi[:, :len(reps)] = self.psi[:, reps]
        self.members = [sorted(self.members[c]) for c in reps]
        self.ncol = len(reps)
        return merged

    def embed(self, dv: int) -> None:
        """Tensor every column with the virtual vacuum (virtual modes innermost)."""
        out = np.zeros((self.psi.shape[0] * dv, self.cap), complex)
        out[::dv, :self.ncol] = self.psi[:, :self.ncol]
        self.psi = out


def _jump(drift: _Drift, psi: np.ndarray, t: float, rng, ens: _Ensemble) -> np.ndarray:
    ops = drift.jump_ops(t)
    outs = [op @ psi for op in ops]
    w = np.array([np.vdot(o, o).real for o in outs])
    total = w.sum()
    if not total > 1e-300:
        log.warning("norm underflow at t=%.6g with no jump channel; keeping state", t)
        return psi / np.linalg.norm(psi)
    k = int(np.searchsorted(np.cumsum(w), rng.random() * total, side="right"))
    k = min(k, len(ops) - 1)
    new = outs[k] / math.sqrt(w[k])
    ens.max_jump_norm_err = max(ens.max_jump_norm_err, abs(np.vdot(new, new).real - 1.0))
    return new


def _locate(drift: _Drift, psi: np.ndarray, t: float, h: float, thr: float) -> Optional[float]:
    def f(tau):
        if tau <= 0:
            return np.vdot(psi, psi).real - thr
        x = drift.rk4(psi, t, tau)
        return np.vdot(x, x).real - thr

    if f(h) >= 0:
        return None
    return brentq(f, 0.0, h, xtol=JUMP_TIME_TOL)


def _advance_single(drift: _Drift, psi: np.ndarray, t: float, t_end: float, m: int,
                    ens: _Ensemble) -> np.ndarray:
    while True:
        h = t_end - t
        end = drift.rk4(psi, t, h) if h > 0 else psi
        if np.vdot(end, end).real >= ens.thr[m]:
            return end
        tau = _locate(drift, psi, t, h, ens.thr[m])
        if tau is None:
            return end
        state = drift.rk4(psi, t, tau) if tau > 0 else psi
        psi = _jump(drift, state, t + tau, ens.rngs[m], ens)
        ens.thr[m] = ens.rngs[m].random()
        ens.n_jumps[m] += 1
        t = t + tau


def _evolve(drift: _Drift, ens: _Ensemble, nodes: np.ndarray) -> None:
    for t, t_next in zip(nodes[:-1], nodes[1:]):
        t, h = float(t), float(t_next - t)
        nc = ens.ncol
        start = ens.psi[:, :nc]
        end = drift.rk4(start, t, h)
        n0 = np.einsum("ij,ij->j", start.conj(), start).real
        n1 = np.einsum("ij,ij->j", end.conj(), end).real
        live = np.array([bool(m) for m in ens.members[:nc]])
        if live.any():
            ens.max_norm_rise = max(ens.max_norm_rise, float(np.max((n1 - n0)[live])))
        maxthr = np.array([ens.max_threshold(c) for c in range(nc)])
        for c in np.nonzero(n1 < maxthr)[0]:
            members = ens.members[c]
            psi0 = start[:, c].copy()
            if len(members) == 1:
                end[:, c] = _advance_single(drift, psi0, t, t + h, members[0], ens)
                continue
            leaving = [m for m in members if ens.thr[m] > n1[c]]
            for m in leaving:
                tau = _locate(drift, psi0, t, h, ens.thr[m])
                if tau is None:
                    continue
                state = drift.rk4(psi0, t, tau) if tau > 0 else psi0
                new = _jump(drift, state, t + tau, ens.rngs[m], ens)
                ens.thr[m] = ens.rngs[m].random()
                ens.n_jumps[m] += 1
                new = _advance_single(drift, new, t + tau, t + h, m, ens)
                members.remove(m)
                ens.add_column(new, [m])
                # add_column may have reallocated; start stays valid as a view of the old buffer
        ens.psi[:, :nc] = end


# ---------------------------------------------------------------------------
# moments


def _virtual_ops(space: HilbertSpace) -> dict:
    av = [annihilation(space, 3 + i).data for i in range(3)]
    nv = [(x.conj().T @ x).tocsr() for x in av]
    pairs = [(1, 2), (0, 2), (0, 1)]
    return {
        "triple": (av[0] @ av[1] @ av[2]).tocsr(),
        "n": nv,
        "nn": [(nv[j] @ nv[k]).tocsr() for j, k in pairs],
        "first": av,
        "pair": [(av[j] @ av[k]).tocsr() for j, k in pairs],
    }


def _expect_cols(op: sp.csr_matrix, psi: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->j", psi.conj(), op @ psi)


def _top_level(space: HilbertSpace, psi: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted ensemble population of the highest level of every mode."""
    p = np.abs(psi) ** 2 @ weights
    p = p.reshape(space.mode_dims)
    out = []
    for i, d in enumerate(space.mode_dims):
        sl = [slice(None)] * space.n_modes
        sl[i] = d - 1
        out.append(float(p[tuple(sl)].sum()))
    return np.array(out)


@dataclass(frozen=True)
class TrajectoryResult:
    n_traj: int
    moments: MomentSet
    std_err: np.ndarray  # (Z, N1..3, NN1..3)
    seed: int
    n_jumps: int = 0
    n_columns: int = 0
    top_level: Optional[np.ndarray] = None
    runtime: float = 0.0
    diagnostics: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    states: Optional[tuple] = field(default=None, repr=False)  # (columns, member counts)

    @property
    def config_hash(self) -> str:
        return manifest_hash(self.manifest)

    def density_matrix(self) -> np.ndarray:
        if self.states is None:
            raise ValueError("run with keep_states=True to rebuild the ensemble state")
        psi, counts = self.states
        return (psi * (counts / counts.sum())) @ psi.conj().T

    def to_dict(self) -> dict:
        return {
            "n_traj": self.n_traj, "seed": self.seed, "n_jumps": self.n_jumps,
            "n_columns": self.n_columns, "runtime_s": self.runtime,
            "std_err": self.std_err.tolist(),
            "top_level": None if self.top_level is None else self.top_level.tolist(),
            "diagnostics": self.diagnostics, "manifest": self.manifest,
            "config_hash": self.config_hash, "moments": self.moments.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def manifest_hash(manifest: dict) -> str:
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _member_rngs(seed: int, n: int) -> list:
    return [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,))) for i in range(n)]


def _initial_columns(sys: CascadeSystem, initial, rngs) -> tuple[np.ndarray, list[list[int]]]:
    d = sys.physical_space.total_dim
    n = len(rngs)
    if isinstance(initial, StateVector):
        if initial.space.mode_dims != sys.physical_space.mode_dims:
            raise ValueError("initial state must live on the physical space")
        psi = initial.normalized().amplitudes.reshape(d, 1)
        return psi.astype(complex), [list(range(n))]
    if initial == "vacuum":
        psi = np.zeros((d, 1), complex)
        psi[0, 0] = 1.0
        return psi, [list(range(n))]
    if initial == "steady":
        rho = liouvillian_steady_state(sys.model, sys.physical_space).data
        w, vecs = np.linalg.eigh(rho)
        keep = w > 1e-14
        w, vecs = w[keep] / w[keep].sum(), vecs[:, keep]
        cdf = np.cumsum(w)
        choice = [min(int(np.searchsorted(cdf, r.random(), side="right")), len(w) - 1) for r in rngs]
        groups = {}
        for i, k in enumerate(choice):
            groups.setdefault(k, []).append(i)
        ks = sorted(groups)
        return vecs[:, ks].astype(complex), [groups[k] for k in ks]
    raise ValueError(f"unknown initial state {initial!r}")


def run_trajectories(sys: CascadeSystem, n_traj: int, seed: int = 0, initial="vacuum",
                     keep_states: bool = False, top_level_max: float = TOP_LEVEL_MAX) -> TrajectoryResult:
    """Monte-Carlo wavefunction ensemble; moments of the virtual modes at the final time.

    initial is "vacuum" (then the warmup brings the device to steady state),
    "steady" (eigenvectors of the exact steady state sampled by weight), or a
    physical-space StateVector.
    """
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    t_start = time.perf_counter()
    rngs = _member_rngs(seed, n_traj)
    psi, members = _initial_columns(sys, initial, rngs)
    thr = np.array([r.random() for r in rngs])
    ens = _Ensemble(psi, members, rngs, thr)
    h = sys.dt
    n_warm = int(round(sys.warmup / h))
    if n_warm:
        warm = _Drift(_pieces(sys.model, sys.physical_space, None), [])
        _evolve(warm, ens, sys.t_grid[:n_warm + 1])
    n_merged = ens.merge()
    ens.embed(sys.virtual_space.total_dim)
    p = _pieces(sys.model, sys.physical_space, sys.virtual_space)
    drift = _Drift(p, sys.couplings())
    _evolve(drift, ens, sys.window_nodes())

    cols = [c for c in range(ens.ncol) if ens.members[c]]
    psi = ens.psi[:, cols]
    psi = psi / np.linalg.norm(psi, axis=0)
    counts = np.array([len(ens.members[c]) for c in cols], float)
    top = _top_level(p.space, psi, counts / n_traj)
    if top.max() > top_level_max:
        raise TruncationError(f"top-level population {top.max():.3e} exceeds {top_level_max:g} "
                              f"(per mode {np.array2string(top, precision=3)}); increase dims")
    ops = _virtual_ops(p.space)
    col_vals = {
        "triple": _expect_cols(ops["triple"], psi),
        "n": np.array([_expect_cols(o, psi).real for o in ops["n"]]),
        "nn": np.array([_expect_cols(o, psi).real for o in ops["nn"]]),
        "first": np.array([_expect_cols(o, psi) for o in ops["first"]]),
        "pair": np.array([_expect_cols(o, psi) for o in ops["pair"]]),
    }
    # expand to per-trajectory rows, ordered by trajectory index
    owner = np.empty(n_traj, dtype=np.int64)
    for ci, c in enumerate(cols):
        owner[ens.members[c]] = ci
    moments = _ensemble_moments({k: (v[..., owner]) for k, v in col_vals.items()})
    err = moments.std_err
    diag = {"max_norm_rise": ens.max_norm_rise, "max_jump_norm_err": ens.max_jump_norm_err,
            "merged_after_warmup": n_merged}
    return TrajectoryResult(
        n_traj=n_traj, moments=moments, std_err=err, seed=seed,
        n_jumps=int(ens.n_jumps.sum()), n_columns=len(cols), top_level=top,
        runtime=time.perf_counter() - t_start, diagnostics=diag,
        manifest={**sys.manifest(), "n_traj": n_traj, "seed": seed,
                  "initial": initial if isinstance(initial, str) else "custom"},
        states=(psi, counts) if keep_states else None,
    )


def _ensemble_moments(vals: dict) -> MomentSet:
    """Means over trajectories with the jackknife covariance of the means.

    For plain means the delete-one jackknife reduces to the sample covariance
    divided by the number of trajectories, which is what is computed here.
    """
    tri = vals["triple"]
    n_traj = tri.shape[-1]
    mean_tri = np.mean(tri)
    phase = mean_tri / abs(mean_tri) if abs(mean_tri) > 0 else 1.0
    z = (tri * np.conj(phase)).real
    stats = np.vstack([z[None, :], vals["n"], vals["nn"]])
    cov = np.cov(stats) / n_traj if n_traj > 1 else np.zeros((7, 7))
    cov = 0.5 * (cov + cov.T)

    def sem(x):
        if n_traj < 2:
            return np.zeros(x.shape[0])
        return np.sqrt((np.var(x.real, axis=-1, ddof=1) + np.var(x.imag, axis=-1, ddof=1)) / n_traj)

    return MomentSet(mean_tri, vals["n"].mean(axis=-1), vals["nn"].mean(axis=-1),
                     first=vals["first"].mean(axis=-1), second_pair=vals["pair"].mean(axis=-1),
                     cov=cov, first_err=sem(vals["first"]), second_pair_err=sem(vals["pair"]))


# ---------------------------------------------------------------------------
# deterministic reference


def _me_rhs(drift: _Drift, rho: np.ndarray, t: float) -> np.ndarray:
    x = drift.matrix(t) @ rho
    out = -1j * (x - x.conj().T)
    for op in drift.jump_ops(t):
        y = op @ rho
        out += op @ y.conj().T
    return out


def _me_evolve(drift: _Drift, rho: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    for t, t_next in zip(nodes[:-1], nodes[1:]):
        t, h = float(t), float(t_next - t)
        k1 = _me_rhs(drift, rho, t)
        k2 = _me_rhs(drift, rho + 0.5 * h * k1, t + h / 2)
        k3 = _me_rhs(drift, rho + 0.5 * h * k2, t + h / 2)
        k4 = _me_rhs(drift, rho + h * k3, t + h)
        rho = rho + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        rho = 0.5 * (rho + rho.conj().T)
    return rho


@dataclass(frozen=True)
class MasterEquationResult:
    moments: MomentSet
    rho: np.ndarray
    space: HilbertSpace


def master_equation_moments(sys: CascadeSystem, initial="vacuum", max_dim: int = 1024) -> MasterEquationResult:
    """Integrate the cascaded master equation directly (small truncations only)."""
    space = sys.space
    if space.total_dim > max_dim:
        raise ValueError(f"dimension {space.total_dim} too large for the dense integrator")
    dp = sys.physical_space.total_dim
    if isinstance(initial, StateVector):
        v = initial.normalized().amplitudes
        rho = np.outer(v, v.conj())
    elif initial == "vacuum":
        rho = np.zeros((dp, dp), complex)
        rho[0, 0] = 1.0
    elif initial == "steady":
        rho = liouvillian_steady_state(sys.model, sys.physical_space).data.copy()
    else:
        raise ValueError(f"unknown initial state {initial!r}")
    h = sys.dt
    n_warm = int(round(sys.warmup / h))
    if n_warm:
        warm = _Drift(_pieces(sys.model, sys.physical_space, None), [])
        rho = _me_evolve(warm, rho, sys.t_grid[:n_warm + 1])
    dv = sys.virtual_space.total_dim
    full = np.zeros((dp * dv, dp * dv), complex)
    full[::dv, ::dv] = rho
    drift = _Drift(_pieces(sys.model, sys.physical_space, sys.virtual_space), sys.couplings())
    full = _me_evolve(drift, full, sys.window_nodes())
    ops = _virtual_ops(space)

    def ev(op):
        return complex(np.sum(op.multiply(full.T)))

    m = MomentSet(ev(ops["triple"]), [ev(o).real for o in ops["n"]], [ev(o).real for o in ops["nn"]],
                  first=np.array([ev(o) for o in ops["first"]]),
                  second_pair=np.array([ev(o) for o in ops["pair"]]))
    return MasterEquationResult(m, full, space)


def single_photon_overlap(v: TemporalMode, gamma: float, gamma_ext: float) -> float:
    """|int v(t) sqrt(gamma_ext) exp(-gamma t / 2) dt|^2 for emission starting at t = 0."""
    lo, hi = v.support
    t = np.linspace(lo, hi, _FINE_POINTS)
    y = v.evaluate(np.clip(t, lo, hi - 1e-12 * (hi - lo))) * math.sqrt(gamma_ext) * np.exp(-0.5 * gamma * t)
    return float(np.trapezoid(y, t) ** 2)
