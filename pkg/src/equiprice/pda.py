"""Shared plumbing for the price-setting authority: stations on a network over a horizon."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dispatch import DispatchProblem, DispatchSolution, solve_dispatch
from .grid import GridError, LoadForecast, Network, StationConfig
from .powerflow import InjectionSchedule, JacobianBundle, deviation_vector


@dataclass(frozen=True)
class StationSystem:
    """A network, its charging stations and their EV demand forecasts.

    ``load`` is K x T in MW, rows aligned with ``stations``.
    """

    net: Network
    stations: tuple[StationConfig, ...]
    load: np.ndarray
    dt_hours: float = 0.25
    dispatch_reg: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "stations", tuple(self.stations))
        load = np.atleast_2d(np.asarray(self.load, dtype=float))
        if load.shape[0] != len(self.stations):
            raise GridError("need exactly one load forecast per station")
        object.__setattr__(self, "load", load)
        for st in self.stations:
            if st.bus_id not in self.net.index:
                raise GridError(f"station {st.station_id} sits on unknown bus {st.bus_id}")
            if self.net.index[st.bus_id] == self.net.slack:
                raise GridError(f"station {st.station_id} cannot sit on the slack bus")

    @classmethod
    def from_forecasts(
        cls,
        net: Network,
        stations: Sequence[StationConfig],
        forecasts: Sequence[LoadForecast],
        dt_hours: float = 0.25,
        dispatch_reg: float = 1e-6,
    ) -> "StationSystem":
        by_id = {fc.station_id: fc for fc in forecasts}
        missing = [st.station_id for st in stations if st.station_id not in by_id]
        if missing:
            raise GridError(f"no load forecast for stations {missing}")
        lengths = {by_id[st.station_id].T for st in stations}
        if len(lengths) > 1:
            raise GridError("load forecasts have different horizons")
        load = np.array([by_id[st.station_id].values for st in stations])
        return cls(net, tuple(stations), load, dt_hours, dispatch_reg)

    @property
    def K(self) -> int:
        return len(self.stations)

    @property
    def T(self) -> int:
        return self.load.shape[1]

    @property
    def station_ids(self) -> tuple[int, ...]:
        return tuple(st.station_id for st in self.stations)

    @property
    def rows(self) -> np.ndarray:
        """Bus positions of the stations."""
        return np.array([self.net.index[st.bus_id] for st in self.stations], dtype=int)

    def schedule(self, p_net: np.ndarray) -> InjectionSchedule:
        """Bus injections when station ``k`` draws ``p_net[k]`` MW on top of the base case."""
        p0, q0 = self.net.injections()
        p = np.repeat(p0[:, None], self.T, axis=1)
        q = np.repeat(q0[:, None], self.T, axis=1)
        np.subtract.at(p, self.rows, np.asarray(p_net, dtype=float) / self.net.base_mva)
        return InjectionSchedule(p, q)

    def problem(self, k: int, prices: np.ndarray) -> DispatchProblem:
        st = self.stations[k]
        return DispatchProblem(
            prices=np.asarray(prices, dtype=float),
            load=self.load[k],
            capacity_e=st.capacity_e,
            soc_init=st.soc_init,
            p_max=st.p_max,
            dt_hours=self.dt_hours,
            reg=self.dispatch_reg,
        )

    def dispatch_all(self, prices: np.ndarray) -> list[DispatchSolution]:
        prices = np.atleast_2d(prices)
        return [solve_dispatch(self.problem(k, prices[k])) for k in range(self.K)]


def injection_deltas(schedule: InjectionSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Change from the prior timestep; the first column is zero."""
    dp = np.zeros_like(schedule.p)
    dq = np.zeros_like(schedule.q)
    dp[:, 1:] = np.diff(schedule.p, axis=1)
    dq[:, 1:] = np.diff(schedule.q, axis=1)
    return dp, dq


def horizon_deviation(bundles: Sequence[JacobianBundle], schedule: InjectionSchedule) -> float:
    """Sum over timesteps of the linearized voltage deviation caused by the change from ``t - 1``."""
    dp, dq = injection_deltas(schedule)
    total = 0.0
    for t in range(1, schedule.T):
        x = deviation_vector(bundles[t], dp[:, t], dq[:, t])
        total += float(x @ x)
    return total


def deviation_operators(system: StationSystem, bundles):
    """Quadratic form ``Q`` and burden map ``Bmap`` over net station power (MW, k-major).

    ``x' Q x`` equals the summed linearized deviation caused by the stations'
    power changes, and ``Bmap x`` is the per-station sum of the dual prices
    those changes imply, before price scaling.  Only neighbouring timesteps
    couple, so both are filled by index.
    """
    K, T = system.K, system.T
    base = system.net.base_mva
    Q = np.zeros((K * T, K * T))
    Bmap = np.zeros((K, K * T))
    rows = np.arange(K)[:, None] * T
    for t in range(1, T):
        M = bundles[t].price_matrix(system.rows)
        now, prev = rows + t, rows + t - 1
        Q[now, now.T] += M
        Q[prev, prev.T] += M
        Q[now, prev.T] -= M
        Q[prev, now.T] -= M
        Bmap[:, now[:, 0]] += M
        Bmap[:, prev[:, 0]] -= M
    return Q / base**2, Bmap * (2.0 / base)


def random_prices(seed: int, K: int, T: int, low: float = 0.1, high: float = 0.5) -> np.ndarray:
    return np.random.default_rng(seed).uniform(low, high, size=(K, T))
