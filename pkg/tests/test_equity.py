import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linprog

from equiprice.equity import PriceMatrix, burden, gamma, gamma_epigraph_terms, gamma_subgradient

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
matrices = st.tuples(st.integers(1, 5), st.integers(1, 6)).flatmap(lambda s: arrays(float, s, elements=finite))


def test_burden_examples():
    assert not burden(np.zeros((3, 4))).any()
    np.testing.assert_allclose(burden(PriceMatrix([[0.1, 0.2], [0.3, 0.1]])), [0.3, 0.4])


def test_gamma_examples():
    assert gamma(np.tile([0.1, 0.4, 0.2], (3, 1))) == 0.0
    assert gamma([[0.1, 0.2], [0.3, 0.1]]) == pytest.approx(-0.1)
    assert gamma([[0.7, -3.0, 2.0]]) == 0.0


def test_price_matrix_validation():
    with pytest.raises(ValueError):
        PriceMatrix([[0.1, np.nan]])
    with pytest.raises(ValueError):
        PriceMatrix([[0.1], [0.2]], station_ids=(1,))
    pm = PriceMatrix([[0.1], [0.2]], station_ids=(7, 9))
    assert pm.row(9)[0] == 0.2 and pm.K == 2 and pm.T == 1


@given(matrices)
def test_burden_is_row_sum(m):
    np.testing.assert_array_equal(burden(m), np.array([sum(row) for row in m]))


@given(matrices)
def test_gamma_nonpositive_and_zero_iff_equal(m):
    g = gamma(m)
    b = burden(m)
    assert g <= 0
    assert (g == 0) == bool(np.all(b == b[0]))


@given(matrices, st.randoms())
def test_gamma_permutation_invariant(m, rnd):
    order = list(range(m.shape[0]))
    rnd.shuffle(order)
    assert gamma(m[order]) == gamma(m)


@given(matrices, st.floats(-3, 3))
def test_gamma_uniform_shift_invariant(m, c):
    assert gamma(m + c) == pytest.approx(gamma(m), abs=1e-9)


@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_gamma_concave(K, T, seed, theta):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(K, T)), rng.normal(size=(K, T))
    mix = gamma(theta * A + (1 - theta) * B)
    assert mix >= theta * gamma(A) + (1 - theta) * gamma(B) - 1e-12


@given(matrices)
def test_subgradient_structure(m):
    g = gamma_subgradient(m)
    assert g.sum() == 0
    rows = g.sum(axis=1)
    b = burden(m)
    if b.max() == b.min():
        assert not g.any()
    else:
        assert sorted(rows[rows != 0]) == [-m.shape[1], m.shape[1]]
        assert rows[int(np.argmax(b))] > 0 and rows[int(np.argmin(b))] < 0


def test_subgradient_ties_to_lowest_index():
    g = gamma_subgradient([[1.0, 1.0], [0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(g.sum(axis=1), [2, -2, 0, 0])


@given(matrices, st.integers(0, 2**32 - 1))
def test_subgradient_inequality(m, seed):
    # -gamma is convex, so it lies above its linearization everywhere
    other = m + np.random.default_rng(seed).normal(size=m.shape)
    g = gamma_subgradient(m)
    assert -gamma(other) >= -gamma(m) + float(np.sum(g * (other - m))) - 1e-9


def test_epigraph_single_station():
    epi = gamma_epigraph_terms(1)
    u, l = epi.feasible_point([0.7])
    assert u == l == 0.7


def test_epigraph_rejects_empty():
    with pytest.raises(ValueError):
        gamma_epigraph_terms(0)


@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_epigraph_lp_reproduces_gamma(K, T, seed):
    prices = np.random.default_rng(seed).uniform(0, 1, (K, T))
    b = burden(prices)
    epi = gamma_epigraph_terms(K)
    # no free x: burdens enter as the offset only
    A, h = epi.constraints(np.zeros((K, 0)), b)
    res = linprog(epi.objective(), A_ub=A, b_ub=h, bounds=(None, None), method="highs")
    assert res.status == 0
    assert res.fun == pytest.approx(-gamma(prices), abs=1e-9)
    u, l = epi.feasible_point(b)
    assert np.all(A @ np.array([u, l]) <= h + 1e-12)
