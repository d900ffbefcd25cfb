"""Truncated multi-mode Fock space.

Operators are stored as scipy CSR matrices, states as dense numpy arrays.
Mode 0 is the outermost Kronecker factor; for the three-mode device this is
the lowest-frequency mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence, Union

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class HilbertSpace:
    mode_dims: tuple[int, ...]
    total_dim: int = field(init=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.mode_dims)
        if not dims:
            raise ValueError("need at least one mode")
        if any(d < 2 for d in dims):
            raise ValueError(f"every mode dimension must be >= 2, got {dims}")
        object.__setattr__(self, "mode_dims", dims)
        object.__setattr__(self, "total_dim", int(np.prod(dims)))

    @property
    def n_modes(self) -> int:
        return len(self.mode_dims)

    def index(self, occupations: Sequence[int]) -> int:
        """Flat basis index of the product state |n_0, n_1, ...>."""
        if len(occupations) != self.n_modes:
            raise ValueError("occupation list does not match mode count")
        return int(np.ravel_multi_index(tuple(occupations), self.mode_dims))

    def occupations(self, index: int) -> tuple[int, ...]:
        return tuple(int(n) for n in np.unravel_index(index, self.mode_dims))

    def basis(self, occupations: Sequence[int]) -> "StateVector":
        amp = np.zeros(self.total_dim, dtype=complex)
        amp[self.index(occupations)] = 1.0
        return StateVector(self, amp)


@dataclass(frozen=True)
class Operator:
    space: HilbertSpace
    data: sp.csr_matrix

    def __post_init__(self):
        n = self.space.total_dim
        if self.data.shape != (n, n):
            raise ValueError(f"operator shape {self.data.shape} does not match dim {n}")
        object.__setattr__(self, "data", sp.csr_matrix(self.data, dtype=complex))

    def dag(self) -> "Operator":
        return Operator(self.space, self.data.conj().T.tocsr())

    def __matmul__(self, other: "Operator") -> "Operator":
        _check_same(self.space, other.space)
        return Operator(self.space, self.data @ other.data)

    def __add__(self, other: "Operator") -> "Operator":
        _check_same(self.space, other.space)
        return Operator(self.space, self.data + other.data)

    def __sub__(self, other: "Operator") -> "Operator":
        _check_same(self.space, other.space)
        return Operator(self.space, self.data - other.data)

    def __mul__(self, c: complex) -> "Operator":
        return Operator(self.space, self.data * c)

    __rmul__ = __mul__

    def __neg__(self) -> "Operator":
        return Operator(self.space, -self.data)

    def dense(self) -> np.ndarray:
        return self.data.toarray()


@dataclass(frozen=True)
class StateVector:
    space: HilbertSpace
    amplitudes: np.ndarray

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=complex)
        if amp.shape != (self.space.total_dim,):
            raise ValueError("amplitude vector has wrong length")
        if not np.all(np.isfinite(amp)):
            raise ValueError("state has non-finite amplitudes")
        object.__setattr__(self, "amplitudes", amp)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        return StateVector(self.space, self.amplitudes / self.norm())

    def to_density(self) -> "DensityMatrix":
        psi = self.amplitudes
        return DensityMatrix(self.space, np.outer(psi, psi.conj()))


@dataclass(frozen=True)
class DensityMatrix:
    space: HilbertSpace
    data: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.data, dtype=complex)
        n = self.space.total_dim
        if rho.shape != (n, n):
            raise ValueError("density matrix has wrong shape")
        object.__setattr__(self, "data", rho)

    def trace(self) -> complex:
        return complex(np.trace(self.data))

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.data - self.data.conj().T), initial=0.0) < tol)

    def min_eigenvalue(self) -> float:
        herm = 0.5 * (self.data + self.data.conj().T)
        return float(np.linalg.eigvalsh(herm)[0])

    def element(self, bra: Sequence[int], ket: Sequence[int]) -> complex:
        """<bra| rho |ket> for product basis states."""
        return complex(self.data[self.space.index(bra), self.space.index(ket)])


State = Union[StateVector, DensityMatrix]


def _check_same(a: HilbertSpace, b: HilbertSpace) -> None:
    if a.mode_dims != b.mode_dims:
        raise ValueError(f"space mismatch: {a.mode_dims} vs {b.mode_dims}")


def destroy(dim: int) -> sp.csr_matrix:
    """Single-mode ladder operator with <n-1|a|n> = sqrt(n)."""
    if dim < 2:
        raise ValueError("dimension must be >= 2")
    return sp.diags(np.sqrt(np.arange(1, dim, dtype=float)), 1, format="csr", dtype=complex)


def _embed(space: HilbertSpace, mode_index: int, local: sp.spmatrix) -> Operator:
    if not 0 <= mode_index < space.n_modes:
        raise IndexError(f"mode index {mode_index} out of range for {space.n_modes} modes")
    factors = [sp.identity(d, dtype=complex, format="csr") for d in space.mode_dims]
    factors[mode_index] = sp.csr_matrix(local)
    return Operator(space, reduce(lambda x, y: sp.kron(x, y, format="csr"), factors))


def annihilation(space: HilbertSpace, mode_index: int) -> Operator:
    """Ladder operator of one mode, identity on the others."""
    if not 0 <= mode_index < space.n_modes:
        raise IndexError(f"mode index {mode_index} out of range for {space.n_modes} modes")
    return _embed(space, mode_index, destroy(space.mode_dims[mode_index]))


def creation(space: HilbertSpace, mode_index: int) -> Operator:
    return annihilation(space, mode_index).dag()


def number(space: HilbertSpace, mode_index: int) -> Operator:
    a = annihilation(space, mode_index)
    return a.dag() @ a


def identity(space: HilbertSpace) -> Operator:
    return Operator(space, sp.identity(space.total_dim, dtype=complex, format="csr"))


def tensor(ops: Sequence[Union[Operator, sp.spmatrix, np.ndarray]],
           space: HilbertSpace | None = None) -> Operator:
    """Kronecker product with mode 0 outermost.

    Each entry is a single-mode matrix (sparse or dense) or a single-mode
    Operator. The result lives on the product space.
    """
    mats = []
    for op in ops:
        m = op.data if isinstance(op, Operator) else sp.csr_matrix(op)
        if m.shape[0] != m.shape[1]:
            raise ValueError("tensor factors must be square")
        mats.append(m)
    dims = tuple(m.shape[0] for m in mats)
    if space is None:
        space = HilbertSpace(dims)
    elif space.mode_dims != dims:
        raise ValueError(f"factor dims {dims} do not match space {space.mode_dims}")
    data = reduce(lambda x, y: sp.kron(x, y, format="csr"), mats)
    return Operator(space, data)


def expectation(op: Operator, state: State) -> complex:
    """<psi|O|psi> for a state vector, tr(O rho) for a density matrix."""
    _check_same(op.space, state.space)
    if isinstance(state, StateVector):
        psi = state.amplitudes
        return complex(np.vdot(psi, op.data @ psi))
    if isinstance(state, DensityMatrix):
        # tr(O rho) = sum_ij O_ij rho_ji
        coo = op.data.tocoo()
        return complex(np.sum(coo.data * state.data[coo.col, coo.row]))
    raise TypeError(f"unsupported state type {type(state).__name__}")
