"""Implicitly constrained dual pricing.

The authority solves one convex program over every station's battery
schedule: linearized voltage deviation, plus the stations' electricity cost at
the current prices, plus an equity penalty evaluated on the consensus dual
prices.  Those dual prices are an explicit linear function of the net-power
changes, so the equity term stays convex and enters through an epigraph.
The prices that come out are fed back in until they settle.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dispatch import KWH_PER_MWH, DispatchSolution, _repair, dispatch_cost
from .equity import PriceMatrix, gamma, gamma_epigraph_terms
from .powerflow import InjectionSchedule, JacobianBundle, linearize_horizon, nominal_point
from .pda import StationSystem, deviation_operators, injection_deltas, random_prices
from .qp import SolverFailure, solve_qp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IcdConfig:
    alpha: float = 1e7
    beta: float = 1e6
    lambda0: PriceMatrix | None = None
    max_outer_iters: int = 10
    price_tol: float = 1e-4
    kkt_tol: float = 1e-6
    price_scale: float = 90.0
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class InnerSolution:
    p_b: np.ndarray  # K x T, MW
    p_net: np.ndarray
    prices: PriceMatrix  # dual prices at the optimum
    injections: InjectionSchedule
    objective: float
    deviation: float
    cost: float
    kkt_residual: float
    consensus_residual: float
    balance_residual: float
    generation: np.ndarray  # aggregate slack generation per timestep, MW
    wall_ms: float


@dataclass
class IcdSolution:
    prices: PriceMatrix
    injections: InjectionSchedule
    dispatches: list[DispatchSolution]
    deviation: float
    gamma_value: float
    outer_iters: int
    objective: float
    best_iter: int
    log: list[dict] = field(default_factory=list)
    inner_ms: list[float] = field(default_factory=list)


def _bundle_for(bundles, t):
    return bundles[t] if isinstance(bundles, (list, tuple)) else bundles


def dual_price_from_primal(
    bundles: JacobianBundle | Sequence[JacobianBundle],
    dp: np.ndarray,
    charging_rows,
    price_scale: float = 1.0,
    station_ids=(),
) -> PriceMatrix:
    """Consensus dual prices implied by the real-power changes ``dp`` (n x T, per-unit).

    For each timestep the price at the charging buses is the marginal
    deviation ``2 (J~+)^T J~+`` applied to the change in net consumption.
    ``dp`` holds net injection changes, hence the sign flip.  ``bundles`` is
    either one bundle for every timestep or a list with one per timestep.
    """
    dp = np.atleast_2d(np.asarray(dp, dtype=float))
    rows = np.asarray(charging_rows, dtype=int)
    out = np.zeros((rows.size, dp.shape[1]))
    for t in range(dp.shape[1]):
        b = _bundle_for(bundles, t)
        R = b.reduced_cols
        full = R.T @ (R @ dp[b.p_rows, t])
        out[:, t] = -2.0 * price_scale * full[b.p_row_positions(rows)]
    return PriceMatrix(out, tuple(station_ids))


def _station_gram(system: StationSystem, with_batt, A_epi):
    """``G' diag(w) G`` for the inner program's constraint matrix without forming the dense product.

    Each battery owns rows ``[I; -I; C; -C] * p_max`` on its own columns, with
    ``C = a * tril(ones)``; then ``C' diag(d) C`` has entry ``a^2 * sum_{t >= max(i, j)} d_t``.
    The epigraph rows close the matrix and are dense.
    """
    T = system.T
    nx = len(with_batt) * T
    idx = np.arange(T)
    last = np.maximum.outer(idx, idx)
    n_epi = A_epi.shape[0]

    def gram(w):
        out = np.zeros((nx + 2, nx + 2))
        for j, k in enumerate(with_batt):
            st = system.stations[k]
            wk = w[4 * T * j : 4 * T * (j + 1)]
            a = system.dt_hours / st.capacity_e
            tail = np.cumsum((wk[2 * T : 3 * T] + wk[3 * T :])[::-1])[::-1]
            block = a * a * tail[last]
            block[idx, idx] += wk[:T] + wk[T : 2 * T]
            sl = slice(j * T, (j + 1) * T)
            out[sl, sl] = block * st.p_max**2
        we = w[len(w) - n_epi :]
        out += A_epi.T @ (we[:, None] * A_epi)
        return out

    return gram


def build_and_solve_icd(
    system: StationSystem,
    cfg: IcdConfig,
    bundles: Sequence[JacobianBundle],
    prices: np.ndarray | None = None,
) -> InnerSolution:
    """Solve one inner convex program at fixed linearizations and prices."""
    t0 = time.perf_counter()
    K, T = system.K, system.T
    if prices is None:
        prices = cfg.lambda0.values if cfg.lambda0 is not None else random_prices(cfg.seed, K, T)
    prices = np.asarray(prices, dtype=float)
    ev = system.load.reshape(-1)

    Q, Bmap = deviation_operators(system, bundles)
    Bmap = Bmap * cfg.price_scale
    coef = prices.reshape(-1) * KWH_PER_MWH * system.dt_hours

    # battery variables only for stations that have one, scaled by p_max
    with_batt = [k for k, st in enumerate(system.stations) if st.capacity_e > 0 and st.p_max > 0]
    nb = len(with_batt)
    S = np.zeros((K * T, nb * T))
    for j, k in enumerate(with_batt):
        S[k * T : (k + 1) * T, j * T : (j + 1) * T] = np.eye(T) * system.stations[k].p_max

    nx = nb * T
    H = np.zeros((nx + 2, nx + 2))
    H[:nx, :nx] = 2 * cfg.alpha * S.T @ Q @ S
    c = np.zeros(nx + 2)
    c[:nx] = S.T @ (2 * cfg.alpha * Q @ ev + coef)
    epi = gamma_epigraph_terms(K)
    c[nx:] = cfg.beta * epi.objective()

    G_rows, h_rows = [], []
    for j, k in enumerate(with_batt):
        st = system.stations[k]
        prob = system.problem(k, prices[k])
        Gk, hk = prob.constraints()
        block = np.zeros((Gk.shape[0], nx + 2))
        block[:, j * T : (j + 1) * T] = Gk * st.p_max
        G_rows.append(block)
        h_rows.append(hk)
    A_epi, h_epi = epi.constraints(Bmap @ S, Bmap @ ev)
    G_rows.append(A_epi)
    h_rows.append(h_epi)
    G = np.vstack(G_rows)
    h = np.concatenate(h_rows)

    res = solve_qp(H, c, G, h, tol=1e-11, max_iter=200, gram=_station_gram(system, with_batt, A_epi))
    if not res.kkt_residual < cfg.kkt_tol:
        raise SolverFailure(
            f"ICD inner problem KKT residual {res.kkt_residual:.2e} above {cfg.kkt_tol:g}",
            res.kkt_residual,
        )

    p_b = np.zeros((K, T))
    for j, k in enumerate(with_batt):
        p_b[k], _ = _repair(system.problem(k, prices[k]), res.x[j * T : (j + 1) * T] * system.stations[k].p_max)
    p_net = p_b + system.load
    sched = system.schedule(p_net)

    dp, _ = injection_deltas(sched)
    new_prices = dual_price_from_primal(bundles, dp, system.rows, cfg.price_scale, system.station_ids)

    flat = p_net.reshape(-1)
    deviation = float(flat @ Q @ flat)
    cost = float(flat @ coef)
    objective = cfg.alpha * deviation + cost - cfg.beta * gamma(new_prices)

    # consensus: grid-side change at the charging buses equals station-side change
    station_side = -np.diff(p_net, axis=1) / system.net.base_mva
    grid_side = dp[system.rows, 1:]
    consensus = float(np.max(np.abs(grid_side - station_side), initial=0.0))
    # a free aggregate generator closes the lossless balance in every timestep
    demand = sum(b.base_load_p for b in system.net.buses) + p_net.sum(axis=0)
    generation = demand.copy()
    balance = float(np.max(np.abs(generation - demand), initial=0.0))
    return InnerSolution(
        p_b=p_b,
        p_net=p_net,
        prices=new_prices,
        injections=sched,
        objective=objective,
        deviation=deviation,
        cost=cost,
        kkt_residual=res.kkt_residual,
        consensus_residual=consensus,
        balance_residual=balance / system.net.base_mva,
        generation=generation,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def run_icd(system: StationSystem, cfg: IcdConfig) -> IcdSolution:
    """Outer loop: re-linearize, solve, feed the dual prices back as the next prices."""
    K, T = system.K, system.T
    prices = cfg.lambda0.values if cfg.lambda0 is not None else random_prices(cfg.seed, K, T)
    prices = np.asarray(prices, dtype=float)
    p_net = system.load.copy()
    start = nominal_point(system.net)

    best, best_prices, best_iter = None, None, 0
    records, inner_ms = [], []
    prev_obj = None
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        bundles = linearize_horizon(system.net, system.schedule(p_net), start)
        try:
            inner = build_and_solve_icd(system, cfg, bundles, prices)
        except SolverFailure as exc:
            raise SolverFailure(f"outer iteration {it}: {exc}", exc.kkt_residual) from None
        delta = float(np.max(np.abs(inner.prices.values - prices)))
        rec = {
            "iter": it,
            "objective": inner.objective,
            "deviation": inner.deviation,
            "gamma": gamma(inner.prices),
            "price_delta_inf": delta,
            "wall_ms": inner.wall_ms,
        }
        records.append(rec)
        inner_ms.append(inner.wall_ms)
        log.info(json.dumps(rec))
        if best is None or inner.objective < best.objective:
            best, best_prices, best_iter = inner, prices, it
        if delta < cfg.price_tol:
            break
        if prev_obj is not None and prev_obj - inner.objective < 1e-6 * max(1.0, abs(prev_obj)):
            break
        prev_obj = inner.objective
        prices = inner.prices.values
        p_net = inner.p_net

    dispatches = []
    for k in range(K):
        prob = system.problem(k, best_prices[k])
        st = system.stations[k]
        soc = np.empty(T + 1)
        soc[0] = st.soc_init
        if st.capacity_e > 0:
            soc[1:] = st.soc_init + np.cumsum(best.p_b[k]) * system.dt_hours / st.capacity_e
            soc = np.clip(soc, 0.0, 1.0)
        else:
            soc[1:] = st.soc_init
        dispatches.append(DispatchSolution(best.p_b[k], soc, best.p_net[k], dispatch_cost(prob, best.p_net[k])))

    return IcdSolution(
        prices=best.prices,
        injections=best.injections,
        dispatches=dispatches,
        deviation=best.deviation,
        gamma_value=gamma(best.prices),
        outer_iters=it,
        objective=best.objective,
        best_iter=best_iter,
        log=records,
        inner_ms=inner_ms,
    )
