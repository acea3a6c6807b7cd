import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dbsubgroup.design_math import (
    AllocationLaw,
    DomainError,
    deviation_curve,
    expected_inverse_arm_size,
    expected_inverse_binomial,
    phi_correction,
    relative_deviation_probability,
    se_ratio_actual_vs_expected,
    se_ratio_curve,
    split_probability,
)
from oracles import split_probability_exact


@st.composite
def laws(draw, max_n=60):
    n = draw(st.integers(2, max_n))
    n1 = draw(st.integers(1, n - 1))
    n_k = draw(st.integers(1, n))
    return AllocationLaw(n, n1, n_k)


@given(laws())
def test_pmf_matches_scipy_hypergeometric(law):
    ks, mass = law.pmf()
    ref = stats.hypergeom(law.n, law.n_k, law.n1).pmf(ks)
    assert np.allclose(mass, ref, rtol=1e-9, atol=1e-15)
    assert math.isclose(mass.sum(), 1.0, rel_tol=1e-12)


@given(laws())
def test_split_probability_matches_integer_oracle(law):
    assert math.isclose(split_probability(law), split_probability_exact(law.n, law.n1, law.n_k),
                        rel_tol=1e-12, abs_tol=1e-13)


@given(laws(), st.floats(0, 2), st.floats(0, 2))
def test_deviation_probability_monotone_and_bounded(law, c1, c2):
    lo, hi = sorted((c1, c2))
    for arm in (0, 1):
        a = relative_deviation_probability(law, arm, lo)
        b = relative_deviation_probability(law, arm, hi)
        assert 0.0 <= a <= b <= 1.0


def test_deviation_probability_hand_case():
    # n = 4, n1 = 2, n_k = 2: n_k1 in {0,1,2} with masses 1/6, 4/6, 1/6
    law = AllocationLaw(4, 2, 2)
    assert math.isclose(relative_deviation_probability(law, 1, 0.0), 4 / 6)
    assert math.isclose(relative_deviation_probability(law, 1, 1.0), 1.0)


def test_deviation_probability_rejects_negative_c():
    with pytest.raises(DomainError):
        relative_deviation_probability(AllocationLaw(10, 5, 4), 1, -0.1)


def test_invalid_law_rejected():
    for args in [(1, 1, 1), (10, 0, 3), (10, 10, 3), (10, 5, 0), (10, 5, 11)]:
        with pytest.raises(DomainError):
            AllocationLaw(*args)


def test_phi_correction_values():
    assert phi_correction(50, 1.0) == 1.0
    assert math.isclose(phi_correction(50, 0.5), 49 / 49.5)
    with pytest.raises(DomainError):
        phi_correction(1, 0.5)


@given(st.integers(2, 500), st.floats(0.01, 1.0))
def test_phi_correction_below_one(n_k, pi):
    assert phi_correction(n_k, pi) <= 1.0


@given(laws(max_n=80))
def test_expected_inverse_dominates_inverse_expectation_when_symmetric(law):
    # Jensen: E(1/X) >= 1/E(X) on the truncated law
    if law.n_k < 2 or law.n_k == law.n:
        return
    ks, mass = law.pmf()
    keep = (ks > 0) & (ks < law.n_k)
    if not keep.any():
        return
    m = mass[keep] / mass[keep].sum()
    mean1 = float(np.sum(m * ks[keep]))
    assert expected_inverse_arm_size(law, 1) >= 1 / mean1 - 1e-15
    assert expected_inverse_arm_size(law, 0) >= 1 / (law.n_k - mean1) - 1e-15


def test_expected_inverse_full_population():
    law = AllocationLaw(10, 4, 10)
    assert expected_inverse_arm_size(law, 1) == 1 / 4
    assert expected_inverse_arm_size(law, 0) == 1 / 6


def test_expected_inverse_binomial_matches_scipy():
    n_k, p = 15, 0.3
    a = np.arange(1, n_k)
    w = stats.binom(n_k, p).pmf(a)
    w /= w.sum()
    assert math.isclose(expected_inverse_binomial(n_k, p, 1), np.sum(w / a), rel_tol=1e-12)
    assert math.isclose(expected_inverse_binomial(n_k, p, 0), np.sum(w / (n_k - a)), rel_tol=1e-12)


def test_se_ratio_is_one_at_zero_deviation():
    assert se_ratio_actual_vs_expected(50, 0.5, 0.0, 1.1, 0.05) == 1.0


@given(st.integers(4, 200), st.floats(-0.4, 0.4))
def test_se_ratio_at_least_one_when_balanced_and_homogeneous(n_k, rel):
    # phi = 1, p = .5: the ratio is minimized at delta = 0
    d = round(rel * 0.5 * n_k)
    if not (1 <= n_k / 2 + d <= n_k - 1):
        return
    assert se_ratio_actual_vs_expected(n_k, 0.5, d, 1.0, 0.0) >= 1 - 1e-15


def test_se_ratio_rejects_impossible_split():
    with pytest.raises(DomainError):
        se_ratio_actual_vs_expected(10, 0.5, 5, 1.0, 0.0)


def test_se_ratio_curve_grid_and_extremes():
    rows = se_ratio_curve(50, 0.5, 1.1, 0.05, 0.2)
    deltas = [d for d, _, _ in rows]
    assert deltas == list(range(-5, 6))
    ratios = [r for *_, r in rows]
    assert math.isclose(max(ratios), 1.026, abs_tol=5e-4)
    assert math.isclose(min(ratios), 1.000, abs_tol=5e-4)
    assert rows[deltas.index(0)][2] == 1.0


def test_deviation_curve_shape():
    rows = deviation_curve(AllocationLaw(40, 20, 12), [0.0, 0.1, 0.2])
    assert [r[0] for r in rows] == [0.0, 0.1, 0.2]
    assert all(0 <= r[1] <= 1 and 0 <= r[2] <= 1 for r in rows)
