"""Subgradient descent on prices through implicitly differentiated station dispatch."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dispatch import DispatchSolution, SensitivityBlock, dispatch_sensitivity
from .equity import PriceMatrix, gamma, gamma_subgradient
from .powerflow import JacobianBundle, linearize_horizon, nominal_point
from .pda import StationSystem, deviation_operators, horizon_deviation, random_prices


@dataclass(frozen=True)
class SdidConfig:
    alpha: float = 1.0
    beta: float = 1.0
    eta_init: float = 5.0
    gamma_decay: float = 0.9
    decay: bool = True
    n_iters: int = 50
    seed: int = 0
    fd_check: bool = False

    def __post_init__(self):
        if not self.eta_init >= 0:
            raise ValueError("eta_init must be non-negative")
        if not 0 < self.gamma_decay <= 1:
            raise ValueError("gamma_decay must lie in (0, 1]")


@dataclass
class SdidRecord:
    iter: int
    F: float
    deviation: float
    gamma: float
    eta: float
    prices: np.ndarray = field(repr=False)
    wall_ms: float = 0.0
    degenerate: int = 0


@dataclass
class SdidTrace:
    records: list[SdidRecord] = field(default_factory=list)
    best_iter: int = 0
    fd_error: float | None = None

    def __len__(self):
        return len(self.records)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "F", "deviation", "gamma", "eta"])
            for r in self.records:
                w.writerow([r.iter] + [f"{x:.12g}" for x in (r.F, r.deviation, r.gamma, r.eta)])


def _p_net(dispatches: Sequence[DispatchSolution]) -> np.ndarray:
    return np.array([d.p_net for d in dispatches])


def objective_F(
    system: StationSystem,
    prices,
    dispatches: Sequence[DispatchSolution],
    bundles: Sequence[JacobianBundle] | None,
    alpha: float,
    beta: float,
) -> float:
    """Weighted linearized voltage deviation minus weighted equity."""
    dev = 0.0
    if alpha != 0:
        dev = horizon_deviation(bundles, system.schedule(_p_net(dispatches)))
    return alpha * dev - beta * gamma(prices)


def grad_F(
    system: StationSystem,
    prices,
    dispatches: Sequence[DispatchSolution],
    sensitivities: Sequence[SensitivityBlock],
    bundles: Sequence[JacobianBundle] | None,
    alpha: float,
    beta: float,
) -> np.ndarray:
    """Chain rule through each station's dispatch, plus the equity subgradient.

    Each station only reacts to its own prices, so the dispatch Jacobian is
    block diagonal and is applied one station at a time.  Linearizations are
    treated as data.
    """
    vals = prices.values if isinstance(prices, PriceMatrix) else np.asarray(prices, dtype=float)
    K, T = vals.shape
    grad = beta * gamma_subgradient(vals)
    if alpha != 0:
        Q, _ = deviation_operators(system, bundles)
        d_dev = (2.0 * alpha * Q @ _p_net(dispatches).reshape(-1)).reshape(K, T)
        for k in range(K):
            grad[k] += sensitivities[k].dp_dlambda.T @ d_dev[k]
    return grad


def evaluate(system: StationSystem, prices: np.ndarray, alpha: float, beta: float, with_grad: bool = True):
    """Dispatch every station at ``prices`` and return F, its pieces and optionally the gradient."""
    dispatches = system.dispatch_all(prices)
    bundles = linearize_horizon(system.net, system.schedule(_p_net(dispatches)), nominal_point(system.net))
    dev = horizon_deviation(bundles, system.schedule(_p_net(dispatches)))
    F = alpha * dev - beta * gamma(prices)
    grad, sens = None, None
    if with_grad:
        sens = [dispatch_sensitivity(system.problem(k, prices[k]), dispatches[k]) for k in range(system.K)]
        grad = grad_F(system, prices, dispatches, sens, bundles, alpha, beta)
    return F, dev, dispatches, bundles, sens, grad


def fd_gradient(system, prices, bundles, alpha, beta, h=1e-5) -> np.ndarray:
    """Central differences of F in every price, re-solving dispatch, linearizations held fixed."""
    prices = np.asarray(prices, dtype=float)
    out = np.zeros_like(prices)
    for idx in np.ndindex(prices.shape):
        vals = []
        for sgn in (1.0, -1.0):
            pert = prices.copy()
            pert[idx] += sgn * h
            vals.append(objective_F(system, pert, system.dispatch_all(pert), bundles, alpha, beta))
        out[idx] = (vals[0] - vals[1]) / (2 * h)
    return out


def run_sdid(system: StationSystem, cfg: SdidConfig, init: np.ndarray | None = None):
    """Run exactly ``n_iters`` price updates; return the best iterate's prices and the trace."""
    prices = random_prices(cfg.seed, system.K, system.T) if init is None else np.array(init, dtype=float)
    eta = cfg.eta_init
    trace = SdidTrace()
    best_F = np.inf
    best_prices = prices.copy()
    for i in range(cfg.n_iters):
        t0 = time.perf_counter()
        F, dev, dispatches, bundles, sens, grad = evaluate(system, prices, cfg.alpha, cfg.beta)
        if cfg.fd_check and i == 0:
            fd = fd_gradient(system, prices, bundles, cfg.alpha, cfg.beta)
            trace.fd_error = float(np.max(np.abs(fd - grad)) / max(1e-12, np.max(np.abs(fd))))
        trace.records.append(
            SdidRecord(
                iter=i,
                F=F,
                deviation=dev,
                gamma=gamma(prices),
                eta=eta,
                prices=prices.copy(),
                wall_ms=(time.perf_counter() - t0) * 1e3,
                degenerate=sum(s.degenerate for s in sens),
            )
        )
        if F < best_F:
            best_F, best_prices, trace.best_iter = F, prices.copy(), i
        prices = prices - eta * grad
        if cfg.decay:
            eta *= cfg.gamma_decay
    return PriceMatrix(best_prices, system.station_ids), trace
