import numpy as np
import pytest
from hypothesis import given, strategies as st
from oracles import random_problem
from scipy.optimize import linprog

from equiprice.dispatch import (
    KWH_PER_MWH,
    DegenerateActiveSet,
    DispatchProblem,
    TooLarge,
    ZeroCapacity,
    check_feasible,
    dispatch_cost,
    dispatch_kkt_residual,
    dispatch_oracle_dp,
    dispatch_sensitivity,
    soc_step,
    solve_dispatch,
)


def lp_optimum(prob):
    """Unregularized cost optimum from an independent LP solver."""
    if not prob.has_battery:
        return float(prob.load @ prob.cost_coefficients())
    G, h = prob.constraints()
    res = linprog(prob.cost_coefficients(), A_ub=G, b_ub=h, bounds=(None, None), method="highs")
    assert res.status == 0
    return float(res.fun + prob.load @ prob.cost_coefficients())


def test_soc_step():
    assert soc_step(0.4, 0.0, 0.25, 1.0) == 0.4
    assert soc_step(0.5, 1.0, 0.25, 1.0) == 0.75
    assert soc_step(0.6, -0.6 * 2.0 / 0.25, 0.25, 2.0) == 0.0
    with pytest.raises(ZeroCapacity):
        soc_step(0.5, 1.0, 0.25, 0.0)


def test_problem_validation():
    with pytest.raises(ValueError):
        DispatchProblem(np.ones(3), np.ones(4), 1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        DispatchProblem(np.ones(3), np.ones(3), 1.0, 1.5, 1.0)
    with pytest.raises(ValueError):
        DispatchProblem(np.ones(3), np.ones(3), 1.0, 0.5, 1.0, dt_hours=0.0)


def test_zero_capacity():
    prob = DispatchProblem(np.array([0.2, 0.3, 0.4]), np.array([1.0, 0.0, 2.0]), 0.0, 0.5, 0.0)
    sol = solve_dispatch(prob)
    assert not sol.p_b.any()
    assert np.array_equal(sol.p_net, prob.load)
    assert sol.cost == pytest.approx(float(np.sum(prob.load * prob.prices)) * KWH_PER_MWH * 0.25)
    assert dispatch_oracle_dp(prob) == sol.cost


def test_constant_price_drains_battery():
    c, E, soc0 = 0.3, 2.0, 0.8
    load = np.linspace(0.5, 1.5, 16)
    prob = DispatchProblem(np.full(16, c), load, E, soc0, E)
    sol = solve_dispatch(prob)
    check_feasible(prob, sol)
    assert sol.soc[-1] == 0.0
    expected = c * KWH_PER_MWH * (0.25 * load.sum() - soc0 * E)
    assert sol.cost == pytest.approx(expected, rel=1e-9)


def test_cheap_then_expensive():
    # an empty battery buys in the cheap interval to sell in the expensive one
    prob = DispatchProblem(np.array([0.1, 0.5]), np.zeros(2), 1.0, 0.0, 1.0)
    sol = solve_dispatch(prob)
    check_feasible(prob, sol)
    np.testing.assert_allclose(sol.p_b, [1.0, -1.0], atol=1e-6)


def test_cheap_then_expensive_respects_soc_ceiling():
    prob = DispatchProblem(np.array([0.1] + [0.5] * 5), np.zeros(6), 1.0, 0.9, 1.0)
    sol = solve_dispatch(prob)
    check_feasible(prob, sol)
    assert sol.soc[1] == 1.0 and sol.soc[-1] == 0.0
    assert sol.p_b[0] == pytest.approx(0.4, abs=1e-9)
    assert sol.cost == pytest.approx(dispatch_oracle_dp(prob, soc_levels=41, power_levels=11), rel=1e-6)


def test_against_dp_and_lp_oracles():
    rng = np.random.default_rng(11)
    for _ in range(40):
        prob = random_problem(rng)
        sol = solve_dispatch(prob)
        check_feasible(prob, sol)
        dp_cost = dispatch_oracle_dp(prob)
        assert sol.cost <= dp_cost + 0.01 * abs(dp_cost) + 1e-6
        assert sol.cost == pytest.approx(lp_optimum(prob), rel=1e-6, abs=1e-3)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1e-6, 1e-3, 1.0, 10.0]))
def test_solutions_feasible_and_certified(seed, reg):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, T=int(rng.integers(1, 25)), reg=reg, on_grid=False)
    sol = solve_dispatch(prob)
    check_feasible(prob, sol)
    assert sol.kkt_residual <= 1e-6
    idle = float(prob.load @ prob.cost_coefficients())
    assert sol.cost <= idle + 1e-9 * abs(idle)


def test_long_horizon_piecewise_constant_prices():
    prices = np.repeat([0.35, 0.15, 0.35, 0.45, 0.35], [36, 20, 8, 20, 12])
    load = np.random.default_rng(0).uniform(0, 2, 96)
    for reg in (1e-6, 10.0):
        prob = DispatchProblem(prices, load, 10.0, 0.8, 10.0, reg=reg)
        sol = solve_dispatch(prob)
        check_feasible(prob, sol)
        assert dispatch_kkt_residual(prob, sol.p_b) <= 1e-6


@given(st.integers(0, 2**32 - 1), st.floats(0.5, 2.0))
def test_price_scaling_keeps_schedule(seed, a):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng)
    scaled = DispatchProblem(a * prob.prices, prob.load, prob.capacity_e, prob.soc_init, prob.p_max)
    np.testing.assert_allclose(solve_dispatch(scaled).p_b, solve_dispatch(prob).p_b, atol=1e-5 * max(prob.p_max, 1))


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_uniform_price_shift(seed, c):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng)
    shifted = DispatchProblem(prob.prices + c, prob.load, prob.capacity_e, prob.soc_init, prob.p_max)
    base, up = solve_dispatch(prob), solve_dispatch(shifted)
    # cost of a fixed schedule moves by the shift times the energy drawn
    assert dispatch_cost(shifted, base.p_net) == pytest.approx(
        base.cost + c * KWH_PER_MWH * prob.dt_hours * base.p_net.sum(), rel=1e-12, abs=1e-9
    )
    # a higher price level never makes the battery take more energy
    assert up.p_b.sum() <= base.p_b.sum() + 1e-6 * max(prob.p_max, 1)


def test_dp_oracle_limits():
    rng = np.random.default_rng(0)
    with pytest.raises(TooLarge):
        dispatch_oracle_dp(random_problem(rng, T=17))
    with pytest.raises(ValueError):
        dispatch_oracle_dp(random_problem(rng), soc_levels=1)


def test_dp_refinement_never_worse():
    rng = np.random.default_rng(5)
    for _ in range(20):
        prob = random_problem(rng)
        assert dispatch_oracle_dp(prob, soc_levels=17) <= dispatch_oracle_dp(prob, soc_levels=9) + 1e-9


def test_solution_csv(tmp_path):
    prob = DispatchProblem(np.array([0.1, 0.5]), np.array([0.3, 0.2]), 1.0, 0.5, 1.0)
    sol = solve_dispatch(prob)
    sol.to_csv(tmp_path / "d.csv", prob.prices, prob.load)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "t,price,load,p_b,soc,p_net" and len(lines) == 3


def test_sensitivity_zero_capacity():
    prob = DispatchProblem(np.full(4, 0.3), np.ones(4), 0.0, 0.5, 0.0)
    blk = dispatch_sensitivity(prob, solve_dispatch(prob))
    assert not blk.dp_dlambda.any()


def _fd_sensitivity(prob, h=1e-5):
    out = np.zeros((prob.T, prob.T))
    for j in range(prob.T):
        up, dn = prob.prices.copy(), prob.prices.copy()
        up[j] += h
        dn[j] -= h
        pu = solve_dispatch(DispatchProblem(up, prob.load, prob.capacity_e, prob.soc_init, prob.p_max, reg=prob.reg))
        pd = solve_dispatch(DispatchProblem(dn, prob.load, prob.capacity_e, prob.soc_init, prob.p_max, reg=prob.reg))
        out[:, j] = (pu.p_net - pd.p_net) / (2 * h)
    return out


def test_sensitivity_matches_finite_differences():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(20):
        T = 8
        prob = DispatchProblem(rng.uniform(0.1, 0.5, T), rng.uniform(0, 2, T), 2.0, rng.uniform(0.2, 0.8), 2.0,
                               reg=rng.uniform(1.0, 10.0))
        sol = solve_dispatch(prob)
        blk = dispatch_sensitivity(prob, sol)
        if blk.degenerate:
            with pytest.raises(DegenerateActiveSet):
                dispatch_sensitivity(prob, sol, strict=True)
            continue
        fd = _fd_sensitivity(prob)
        scale = max(np.max(np.abs(fd)), 1e-12)
        assert np.max(np.abs(blk.dp_dlambda - fd)) <= 1e-4 * scale
        np.testing.assert_allclose(blk.dp_dlambda, blk.dp_dlambda.T, atol=1e-10 * scale)
        checked += 1
    assert checked >= 10


def test_sensitivity_interior_closed_form():
    prob = DispatchProblem(np.array([0.30, 0.31, 0.29]), np.zeros(3), 10.0, 0.5, 10.0, reg=50.0)
    sol = solve_dispatch(prob)
    blk = dispatch_sensitivity(prob, sol)
    assert not blk.active.any()
    np.testing.assert_allclose(blk.dp_dlambda, -KWH_PER_MWH * 0.25 / (2 * 50.0) * np.eye(3), rtol=1e-12)
