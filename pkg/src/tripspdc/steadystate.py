"""Weak-drive steady state: closed-form second-order expansion and exact oracle.

The expansion parameter is lambda = g / gamma_T. The closed form keeps the
three-photon coherence to first order and populations / two-photon coherence
to second order. Kerr terms are ignored by the expansion; the oracle can keep
them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .device import DeviceModel, build_hamiltonian, collapse_operators, gamma_total
from .fock import DensityMatrix, HilbertSpace, Operator, annihilation, expectation

LAMBDA_WARN = 0.1
LAMBDA_MAX = 0.5


class PerturbativeRangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PTCoefficients:
    lam: float
    first_order_amp: float
    beta: float
    delta: float
    epsilon: float
    theta: float
    psi: float
    kappa: float
    xi: float
    chi_c: float


@dataclass(frozen=True)
class CavityCorrelators:
    """|<a1 a2 a3>|, <n_i>, and <n_j n_k> stored at the complementary index i."""

    triple_abs: float
    n: np.ndarray
    nn: np.ndarray


def _complement(i: int) -> tuple[int, int]:
    j, k = [m for m in range(3) if m != i]
    return j, k


def _rates(model: DeviceModel) -> tuple[float, float, float, float]:
    g1, g2, g3 = (float(x) for x in model.gammas)
    gt = g1 + g2 + g3
    if gt <= 0:
        raise ValueError("total decay rate must be positive")
    return g1, g2, g3, gt


def _check_lambda(model: DeviceModel) -> None:
    lam = abs(model.lam)
    if lam >= LAMBDA_MAX:
        raise ValueError(f"g/gamma_T = {lam:.3g} is outside the perturbative range")
    if lam > LAMBDA_WARN:
        warnings.warn(f"g/gamma_T = {lam:.3g} > {LAMBDA_WARN}; expansion is unreliable",
                      PerturbativeRangeWarning, stacklevel=3)


def pt_coefficients(model: DeviceModel) -> PTCoefficients:
    g1, g2, g3, gt = _rates(model)
    if min(g1, g2, g3) <= 0:
        raise ValueError("all total decay rates must be positive")
    amp = 2.0 * model.g / gt
    r = amp * amp
    return PTCoefficients(
        lam=model.g / gt,
        first_order_amp=amp,
        beta=r,
        delta=-math.sqrt(2.0) * r,
        epsilon=r * g1 / (g2 + g3),
        theta=r * g2 / (g1 + g3),
        psi=r * g3 / (g1 + g2),
        chi_c=r * (g1 * g2 / g3) * (1.0 / (g1 + g3) + 1.0 / (g2 + g3)),
        xi=r * (g1 * g3 / g2) * (1.0 / (g1 + g2) + 1.0 / (g2 + g3)),
        kappa=r * (g2 * g3 / g1) * (1.0 / (g1 + g2) + 1.0 / (g1 + g3)),
    )


def pt_cavity_correlators(model: DeviceModel) -> CavityCorrelators:
    g1, g2, g3, gt = _rates(model)
    if min(g1, g2, g3) <= 0:
        raise ValueError("all total decay rates must be positive")
    _check_lambda(model)
    gam = np.array([g1, g2, g3])
    amp = 2.0 * abs(model.g) / gt
    r = amp * amp
    n = r * gt / gam
    nn = np.array([r * gt / (gam[j] + gam[k]) for j, k in map(_complement, range(3))])
    return CavityCorrelators(amp, n, nn)


def pt_orders(model: DeviceModel, space: HilbertSpace) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zeroth, first and second order pieces of the expanded steady state."""
    if space.n_modes != 3 or min(space.mode_dims) < 3:
        raise ValueError("expansion needs three modes with at least 3 levels each")
    c = pt_coefficients(model)
    n = space.total_dim
    idx = space.index
    rho0 = np.zeros((n, n), complex)
    rho1 = np.zeros((n, n), complex)
    rho2 = np.zeros((n, n), complex)
    v, t = idx((0, 0, 0)), idx((1, 1, 1))
    rho0[v, v] = 1.0
    rho1[v, t] = 1j * c.first_order_amp
    rho1[t, v] = -1j * c.first_order_amp
    d = idx((2, 2, 2))
    rho2[d, v] = c.delta
    rho2[v, d] = c.delta
    diag = {
        (1, 1, 1): c.beta,
        (0, 1, 1): c.epsilon,
        (1, 0, 1): c.theta,
        (1, 1, 0): c.psi,
        (1, 0, 0): c.kappa,
        (0, 1, 0): c.xi,
        (0, 0, 1): c.chi_c,
    }
    for occ, val in diag.items():
        rho2[idx(occ), idx(occ)] += val
    return rho0, rho1, rho2


def pt_density_matrix(model: DeviceModel, space: HilbertSpace,
                      renormalize: bool = False) -> DensityMatrix:
    """Expanded steady state through second order (raw, trace 1 + O(lambda^2))."""
    rho = sum(pt_orders(model, space))
    if renormalize:
        rho = rho / np.trace(rho)
    return DensityMatrix(space, rho)


# ---------------------------------------------------------------------------
# Liouvillian machinery (column-stacking vectorization: vec(A X B) = (B^T kron A) vec X)


def liouvillian(h: sp.spmatrix | None, c_ops: Sequence[sp.spmatrix], dim: int) -> sp.csr_matrix:
    eye = sp.identity(dim, dtype=complex, format="csr")
    out = sp.csr_matrix((dim * dim, dim * dim), dtype=complex)
    if h is not None:
        h = sp.csr_matrix(h)
        out = out - 1j * (sp.kron(eye, h) - sp.kron(h.T, eye))
    for c in c_ops:
        c = sp.csr_matrix(c)
        cdc = (c.conj().T @ c).tocsr()
        out = out + sp.kron(c.conj(), c) - 0.5 * sp.kron(eye, cdc) - 0.5 * sp.kron(cdc.T, eye)
    return out.tocsr()


def vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v: np.ndarray, dim: int) -> np.ndarray:
    return np.asarray(v).reshape((dim, dim), order="F")


def device_liouvillian(model: DeviceModel, space: HilbertSpace, kerr: bool = True) -> sp.csr_matrix:
    m = model if kerr else model.without_kerr()
    h = build_hamiltonian(m, space).data
    cs = [c.data for c in collapse_operators(m, space)]
    return liouvillian(h, cs, space.total_dim)


def perturbation_parts(model: DeviceModel, space: HilbertSpace) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """(L0, L1): dissipation only, and the three-photon commutator."""
    l_full = device_liouvillian(model, space, kerr=False)
    l0 = device_liouvillian(model.with_g(0.0), space, kerr=False)
    return l0, (l_full - l0).tocsr()


class SteadyStateError(RuntimeError):
    pass


def null_state(lv: sp.spmatrix, dim: int) -> np.ndarray:
    """Unit-trace null vector of a Liouvillian via sparse LU with a trace row."""
    a = sp.lil_matrix(lv, dtype=complex)
    trace_row = np.zeros(dim * dim, complex)
    trace_row[np.arange(dim) * (dim + 1)] = 1.0
    a[0, :] = trace_row
    b = np.zeros(dim * dim, complex)
    b[0] = 1.0
    try:
        lu = spla.splu(sp.csc_matrix(a))
    except RuntimeError as exc:
        raise SteadyStateError(f"Liouvillian is singular: {exc}") from exc
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SteadyStateError("steady-state solve produced non-finite entries")
    return unvec(x, dim)


def liouvillian_steady_state(model: DeviceModel, space: HilbertSpace,
                             kerr: bool = True, tol: float = 1e-10) -> DensityMatrix:
    """Exact steady state of the truncated master equation."""
    if space.total_dim > 4096:
        raise ValueError("space too large for the direct solve")
    lv = device_liouvillian(model, space, kerr=kerr)
    rho = null_state(lv, space.total_dim)
    rho = 0.5 * (rho + rho.conj().T)
    rho /= np.trace(rho).real
    resid = np.linalg.norm(lv @ vec(rho))
    scale = spla.norm(lv)
    if resid > tol * scale:
        raise SteadyStateError(f"residual {resid:.3e} exceeds {tol:g} * |L| = {tol * scale:.3e}")
    return DensityMatrix(space, rho)


def cavity_correlators(rho: DensityMatrix) -> CavityCorrelators:
    """Read the witness ingredients off any three-mode density matrix."""
    space = rho.space
    a = [annihilation(space, i) for i in range(3)]
    num = [x.dag() @ x for x in a]
    triple = expectation(a[0] @ a[1] @ a[2], rho)
    n = np.array([expectation(x, rho).real for x in num])
    nn = np.array([expectation(num[j] @ num[k], rho).real for j, k in map(_complement, range(3))])
    return CavityCorrelators(abs(triple), n, nn)


def top_level_population(rho: DensityMatrix) -> np.ndarray:
    """Population of the highest retained Fock level of each mode."""
    p = np.real(np.diag(rho.data)).reshape(rho.space.mode_dims)
    out = []
    for i, d in enumerate(rho.space.mode_dims):
        sl = [slice(None)] * rho.space.n_modes
        sl[i] = d - 1
        out.append(float(p[tuple(sl)].sum()))
    return np.array(out)
