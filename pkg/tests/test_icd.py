import numpy as np
import pytest

from equiprice.equity import PriceMatrix, gamma, gamma_epigraph_terms
from equiprice.grid import StationConfig
from equiprice.harness import DATA_DIR, load_scenario
from equiprice.icd import IcdConfig, _station_gram, build_and_solve_icd, dual_price_from_primal, run_icd
from equiprice.pda import StationSystem, deviation_operators, horizon_deviation
from equiprice.powerflow import InjectionSchedule, assemble_jacobian, linearize_horizon, nominal_point


def nominal_bundles(system, p_net=None):
    p_net = system.load if p_net is None else p_net
    return linearize_horizon(system.net, system.schedule(p_net), nominal_point(system.net))


def test_config_validation():
    with pytest.raises(ValueError):
        IcdConfig(alpha=0.0)
    with pytest.raises(ValueError):
        IcdConfig(beta=-1.0)


def test_dual_prices_zero_and_linear(ieee14):
    bundle = assemble_jacobian(ieee14, nominal_point(ieee14))
    rows = np.array([10, 11, 12, 13])
    assert not dual_price_from_primal(bundle, np.zeros((14, 3)), rows).values.any()
    rng = np.random.default_rng(0)
    d1, d2 = rng.normal(size=(14, 3)), rng.normal(size=(14, 3))
    lhs = dual_price_from_primal(bundle, 2.0 * d1 - 3.0 * d2, rows).values
    rhs = 2.0 * dual_price_from_primal(bundle, d1, rows).values - 3.0 * dual_price_from_primal(bundle, d2, rows).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_dual_prices_match_independent_pseudo_inverse(ieee14):
    bundle = assemble_jacobian(ieee14, nominal_point(ieee14))
    ns = ieee14.non_slack
    Jp = np.linalg.pinv(bundle.full)
    R = Jp[:, : ns.size]
    rows = np.array([10, 11, 12, 13])
    pos = [list(ns).index(r) for r in rows]
    dp = np.random.default_rng(1).normal(size=(14, 2))
    got = dual_price_from_primal(bundle, dp, rows, price_scale=7.0).values
    for t in range(2):
        # injections are negative consumption, so a price on consumption flips sign
        want = -2.0 * 7.0 * (R.T @ R @ dp[ns, t])[pos]
        np.testing.assert_allclose(got[:, t], want, rtol=1e-8, atol=1e-12)


def test_dual_price_matrix_is_psd(ieee14):
    bundle = assemble_jacobian(ieee14, nominal_point(ieee14))
    M = 2.0 * bundle.price_matrix()
    np.testing.assert_allclose(M, M.T, atol=1e-12 * np.abs(M).max())
    rng = np.random.default_rng(2)
    for _ in range(50):
        x = rng.normal(size=M.shape[0])
        assert x @ M @ x >= -1e-10 * (x @ x) * np.abs(M).max()


def test_deviation_operator_matches_horizon_sum(tiny_system):
    bundles = nominal_bundles(tiny_system)
    Q, _ = deviation_operators(tiny_system, bundles)
    p_net = np.random.default_rng(3).uniform(0, 2, tiny_system.load.shape)
    want = horizon_deviation(bundles, tiny_system.schedule(p_net))
    assert float(p_net.reshape(-1) @ Q @ p_net.reshape(-1)) == pytest.approx(want, rel=1e-10)


def _dense_constraints(system, A_epi, with_batt):
    T = system.T
    nx = len(with_batt) * T
    rows = []
    for j, k in enumerate(with_batt):
        Gk, _ = system.problem(k, np.zeros(T)).constraints()
        block = np.zeros((Gk.shape[0], nx + 2))
        block[:, j * T : (j + 1) * T] = Gk * system.stations[k].p_max
        rows.append(block)
    return np.vstack(rows + [A_epi])


def test_structured_gram_matches_dense(tiny_system):
    K, T = tiny_system.K, tiny_system.T
    with_batt = list(range(K))
    A_epi, _ = gamma_epigraph_terms(K).constraints(np.random.default_rng(4).normal(size=(K, K * T)), np.zeros(K))
    G = _dense_constraints(tiny_system, A_epi, with_batt)
    w = np.random.default_rng(5).uniform(0.1, 3.0, G.shape[0])
    gram = _station_gram(tiny_system, with_batt, A_epi)
    np.testing.assert_allclose(gram(w), G.T @ (w[:, None] * G), rtol=1e-12, atol=1e-12)


def test_zero_load_zero_prices_stays_idle(tiny_system):
    system = StationSystem(tiny_system.net, tiny_system.stations, np.zeros_like(tiny_system.load), 0.25)
    cfg = IcdConfig(beta=0.0)
    inner = build_and_solve_icd(system, cfg, nominal_bundles(system), prices=np.zeros((system.K, system.T)))
    # a constant battery power is free here, so only the changes are pinned
    assert np.max(np.abs(np.diff(inner.p_net, axis=1))) < 1e-6
    assert inner.objective == pytest.approx(0.0, abs=1e-6)


def test_single_station_equity_term_vanishes(tiny_system):
    system = StationSystem(tiny_system.net, tiny_system.stations[:1], tiny_system.load[:1], 0.25)
    bundles = nominal_bundles(system)
    prices = np.full((1, system.T), 0.3)
    a = build_and_solve_icd(system, IcdConfig(beta=0.0), bundles, prices)
    b = build_and_solve_icd(system, IcdConfig(beta=1e6), bundles, prices)
    assert gamma(b.prices) == 0.0
    np.testing.assert_allclose(a.p_b, b.p_b, atol=1e-6)


def test_equity_improves_with_beta(tiny_system):
    bundles = nominal_bundles(tiny_system)
    prices = np.random.default_rng(6).uniform(0.1, 0.5, (tiny_system.K, tiny_system.T))
    gammas = []
    for beta in (0.0, 1.0, 10.0, 100.0):
        cfg = IcdConfig(alpha=1e5, beta=beta)
        gammas.append(abs(gamma(build_and_solve_icd(tiny_system, cfg, bundles, prices).prices)))
    assert all(b <= a + 1e-9 for a, b in zip(gammas, gammas[1:]))
    assert gammas[-1] < gammas[0]


@pytest.fixture(scope="module")
def config1_system():
    return load_scenario(DATA_DIR / "config1.toml").system()


def test_config1_inner_certificates(config1_system):
    sc = load_scenario(DATA_DIR / "config1.toml")
    inner = build_and_solve_icd(config1_system, sc.icd, nominal_bundles(config1_system))
    assert inner.kkt_residual < 1e-6
    assert inner.consensus_residual < 1e-6
    assert inner.balance_residual < 1e-8
    for k, st in enumerate(config1_system.stations):
        assert np.all(np.abs(inner.p_b[k]) <= st.p_max)
        if st.capacity_e > 0:
            soc = st.soc_init + np.cumsum(inner.p_b[k]) * 0.25 / st.capacity_e
            assert soc.min() >= -1e-12 and soc.max() <= 1 + 1e-12
    assert np.all(inner.injections.q == inner.injections.q[:, :1])


def test_huge_price_tolerance_stops_after_one_iteration(config1_system):
    sol = run_icd(config1_system, IcdConfig(price_tol=1e9))
    assert sol.outer_iters == 1 and len(sol.log) == 1


def test_run_icd_returns_best_iterate(config1_system):
    sol = run_icd(config1_system, IcdConfig(seed=3))
    assert sol.objective <= sol.log[0]["objective"]
    assert sol.gamma_value == gamma(sol.prices)
    assert set(sol.log[0]) == {"iter", "objective", "deviation", "gamma", "price_delta_inf", "wall_ms"}


def test_explicit_initial_prices(tiny_system):
    lam0 = PriceMatrix(np.full((tiny_system.K, tiny_system.T), 0.3))
    sol = run_icd(tiny_system, IcdConfig(alpha=1.0, beta=1.0, lambda0=lam0, price_scale=1.0, max_outer_iters=2))
    assert sol.prices.values.shape == (tiny_system.K, tiny_system.T)
    assert len(sol.dispatches) == tiny_system.K


def test_station_without_battery(tiny_system):
    stations = (tiny_system.stations[0], StationConfig(2, 4, 0.0, 0.5))
    system = StationSystem(tiny_system.net, stations, tiny_system.load, 0.25)
    inner = build_and_solve_icd(system, IcdConfig(alpha=1.0, beta=1.0, price_scale=1.0), nominal_bundles(system))
    assert not inner.p_b[1].any()
    np.testing.assert_array_equal(inner.p_net[1], system.load[1])


def test_bundles_from_schedule_not_mutated(ieee14):
    p0, q0 = ieee14.injections()
    sched = InjectionSchedule(np.repeat(p0[:, None], 3, 1), np.repeat(q0[:, None], 3, 1))
    before = sched.p.copy()
    linearize_horizon(ieee14, sched)
    np.testing.assert_array_equal(sched.p, before)
