import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripspdc.fock import (DensityMatrix, HilbertSpace, StateVector, annihilation, creation,
                           expectation, identity, number, tensor)

dims_st = st.lists(st.integers(2, 4), min_size=1, max_size=3).map(tuple)


def test_dimensions_and_index_roundtrip():
    s = HilbertSpace((3, 4, 2))
    assert s.total_dim == 24
    for i in range(s.total_dim):
        assert s.index(s.occupations(i)) == i
    # mode 0 is the outermost factor
    assert s.index((1, 0, 0)) == 8


def test_rejects_bad_dims():
    with pytest.raises(ValueError):
        HilbertSpace((3, 1))
    with pytest.raises(ValueError):
        HilbertSpace(())


def test_ladder_action():
    s = HilbertSpace((4,))
    a, ad = annihilation(s, 0).dense(), creation(s, 0).dense()
    e2 = s.basis((2,)).amplitudes
    np.testing.assert_allclose(a @ e2, np.sqrt(2) * s.basis((1,)).amplitudes)
    np.testing.assert_allclose(ad @ e2, np.sqrt(3) * s.basis((3,)).amplitudes)
    # top level is annihilated by a^+
    assert np.allclose(ad @ s.basis((3,)).amplitudes, 0)


@given(dims_st)
@settings(max_examples=30, deadline=None)
def test_number_is_diagonal_occupation(dims):
    s = HilbertSpace(dims)
    for m in range(s.n_modes):
        n = number(s, m).data.diagonal().real
        occ = np.array([s.occupations(i)[m] for i in range(s.total_dim)])
        np.testing.assert_allclose(n, occ, atol=1e-12)


@given(dims_st)
@settings(max_examples=30, deadline=None)
def test_canonical_commutator_below_top_level(dims):
    s = HilbertSpace(dims)
    for m in range(s.n_modes):
        a = annihilation(s, m)
        comm = (a @ a.dag() - a.dag() @ a).dense()
        keep = np.array([s.occupations(i)[m] < dims[m] - 1 for i in range(s.total_dim)])
        sub = comm[np.ix_(keep, keep)]
        np.testing.assert_allclose(sub, np.eye(keep.sum()), atol=1e-12)


def test_operators_on_different_modes_commute():
    s = HilbertSpace((3, 3, 3))
    a = [annihilation(s, i) for i in range(3)]
    for i in range(3):
        for j in range(3):
            if i != j:
                x = (a[i] @ a[j].dag() - a[j].dag() @ a[i]).data
                assert abs(x).max() < 1e-14


def test_tensor_matches_embedding():
    s = HilbertSpace((2, 3))
    a1 = annihilation(HilbertSpace((3,)), 0).data
    op = tensor([np.eye(2), a1], s)
    assert abs(op.data - annihilation(s, 1).data).max() == 0
    assert abs(identity(s).data - np.eye(6)).max() == 0


def test_expectation_state_and_density_agree():
    s = HilbertSpace((3, 3))
    rng = np.random.default_rng(0)
    psi = StateVector(s, rng.normal(size=9) + 1j * rng.normal(size=9)).normalized()
    op = annihilation(s, 0).dag() @ annihilation(s, 1)
    assert np.isclose(expectation(op, psi), expectation(op, psi.to_density()))


def test_space_mismatch_raises():
    a = annihilation(HilbertSpace((2, 2)), 0)
    b = annihilation(HilbertSpace((3, 2)), 0)
    with pytest.raises(ValueError):
        a @ b
    with pytest.raises(ValueError):
        DensityMatrix(HilbertSpace((2,)), np.eye(3))
