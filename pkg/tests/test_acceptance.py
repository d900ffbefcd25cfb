"""Acceptance criteria 1-11, one test each.

Each test prints a single PASS/FAIL line, collected again in the terminal
summary, and asserts the criterion. Criteria 3 and 6 run
trajectory ensembles and take up to a minute each.
"""

import pytest

from tripspdc import acceptance


@pytest.fixture
def check(acceptance_log):
    def run(res):
        print(res.line())
        acceptance_log.append(res.line())
        assert res.passed, res.line()
    return run


def test_criterion_01_witness_arithmetic(check):
    check(acceptance.witness_arithmetic())


def test_criterion_02_pt_vs_oracle(check):
    check(acceptance.pt_vs_oracle())


@pytest.mark.slow
def test_criterion_03_cascade_vs_analytic(check):
    check(acceptance.cascade_vs_analytic())


def test_criterion_04_scaling_exponents(check):
    check(acceptance.scaling_exponents())


def test_criterion_05_scaling_law(check):
    check(acceptance.scaling_law())


@pytest.mark.slow
def test_criterion_06_filter_shape(check):
    check(acceptance.filter_shape())


def test_criterion_07_unit_conventions(check):
    check(acceptance.unit_conventions())


def test_criterion_08_calibration_round_trip(check):
    check(acceptance.calibration_round_trip())


def test_criterion_09_error_propagation(check):
    check(acceptance.error_propagation())


def test_criterion_10_non_gaussianity(check):
    check(acceptance.non_gaussianity())


def test_criterion_11_invariants(check):
    check(acceptance.invariant_suite())
