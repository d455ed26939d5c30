"""Cost-minimizing battery dispatch for one charging station.

Prices are $/kWh, powers MW and the timestep ``dt_hours``, so one MW held for
one interval costs ``price * 1000 * dt_hours`` dollars.  Battery power is
positive while charging.  A small strictly convex term ``reg * ||p_b||^2``
makes the optimizer unique; the reported ``cost`` excludes it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .qp import SolverFailure, solve_qp

KWH_PER_MWH = 1000.0
ACTIVE_TOL = 1e-8
KKT_TOL = 1e-6
# values this close to a bound are put on it; solve round-off is ~eps * |c| / reg
SNAP_TOL = 1e-7


class ZeroCapacity(ValueError):
    pass


class TooLarge(ValueError):
    pass


class DegenerateActiveSet(RuntimeError):
    pass


@dataclass(frozen=True)
class DispatchProblem:
    prices: np.ndarray
    load: np.ndarray
    capacity_e: float
    soc_init: float
    p_max: float
    dt_hours: float = 0.25
    reg: float = 1e-6

    def __post_init__(self):
        prices = np.asarray(self.prices, dtype=float)
        load = np.asarray(self.load, dtype=float)
        if prices.shape != load.shape or prices.ndim != 1:
            raise ValueError("prices and load must be 1-D arrays of equal length")
        if not self.dt_hours > 0:
            raise ValueError("dt_hours must be positive")
        if self.capacity_e < 0 or self.p_max < 0:
            raise ValueError("capacity_e and p_max must be non-negative")
        if not 0.0 <= self.soc_init <= 1.0:
            raise ValueError("soc_init must lie in [0, 1]")
        if not self.reg > 0:
            raise ValueError("reg must be positive")
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "load", load)

    @property
    def T(self) -> int:
        return self.prices.size

    @property
    def has_battery(self) -> bool:
        return self.capacity_e > 0 and self.p_max > 0

    def cost_coefficients(self) -> np.ndarray:
        """Dollars per MW drawn in each interval."""
        return self.prices * KWH_PER_MWH * self.dt_hours

    def constraints(self) -> tuple[np.ndarray, np.ndarray]:
        """``G p <= h`` over battery power: power box, then SoC upper, then SoC lower."""
        T = self.T
        eye = np.eye(T)
        cum = np.tril(np.ones((T, T))) * (self.dt_hours / self.capacity_e)
        G = np.vstack([eye, -eye, cum, -cum])
        h = np.concatenate(
            [
                np.full(T, self.p_max),
                np.full(T, self.p_max),
                np.full(T, 1.0 - self.soc_init),
                np.full(T, self.soc_init),
            ]
        )
        return G, h

    def constraint_scale(self) -> np.ndarray:
        """Natural size of each constraint row, for relative activity tests."""
        T = self.T
        return np.concatenate([np.full(2 * T, self.p_max), np.ones(2 * T)])


@dataclass(frozen=True)
class DispatchSolution:
    p_b: np.ndarray
    soc: np.ndarray
    p_net: np.ndarray
    cost: float
    kkt_residual: float = 0.0

    def to_csv(self, path: str | Path, prices, load) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "price", "load", "p_b", "soc", "p_net"])
            for t in range(self.p_b.size):
                w.writerow(
                    [t]
                    + [f"{x:.12g}" for x in (prices[t], load[t], self.p_b[t], self.soc[t + 1], self.p_net[t])]
                )


@dataclass(frozen=True)
class SensitivityBlock:
    dp_dlambda: np.ndarray
    active: np.ndarray = field(repr=False)
    degenerate: bool = False


def soc_step(soc: float, p_b: float, dt_hours: float, capacity_e: float) -> float:
    if capacity_e == 0:
        raise ZeroCapacity("battery with zero capacity has no state of charge")
    return soc + p_b * dt_hours / capacity_e


def dispatch_cost(prob: DispatchProblem, p_net) -> float:
    return float(np.asarray(p_net) @ prob.cost_coefficients())


def _idle(prob: DispatchProblem) -> DispatchSolution:
    p_b = np.zeros(prob.T)
    soc = np.full(prob.T + 1, prob.soc_init)
    p_net = prob.load.copy()
    return DispatchSolution(p_b, soc, p_net, dispatch_cost(prob, p_net), 0.0)


def _active_set_polish(H, c, G, h, scale, guess_active):
    """Re-solve with ``guess_active`` as equalities; None if the guess is not optimal."""
    A, bA = G[guess_active], h[guess_active]
    n = c.size
    if A.shape[0]:
        U, sv, Vt = np.linalg.svd(A)
        rank = int(np.sum(sv > 1e-10 * sv[0]))
        x = np.linalg.lstsq(A, bA, rcond=None)[0]
        if np.max(np.abs(A @ x - bA)) > 1e-9 * max(1.0, np.max(np.abs(bA))):
            return None
        Z = Vt[rank:].T
    else:
        x = np.zeros(n)
        Z = np.eye(n)
    if Z.shape[1]:
        w = np.linalg.solve(Z.T @ H @ Z, -Z.T @ (H @ x + c))
        x = x + Z @ w
    if np.any(G @ x - h > SNAP_TOL * scale):
        return None
    grad = H @ x + c
    if A.shape[0]:
        _, rnorm = nnls(A.T, -grad)
    else:
        rnorm = float(np.linalg.norm(grad))
    if rnorm > 1e-9 * max(1.0, np.max(np.abs(c))):
        return None
    return x


def _repair(prob: DispatchProblem, p_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Snap round-off onto the bounds so power and SoC limits hold exactly."""
    p_b = np.array(p_b, dtype=float)
    near = np.abs(np.abs(p_b) - prob.p_max) <= SNAP_TOL * prob.p_max
    p_b[near] = np.sign(p_b[near]) * prob.p_max
    p_b = np.clip(p_b, -prob.p_max, prob.p_max)
    soc = np.empty(prob.T + 1)
    soc[0] = prob.soc_init
    for t in range(prob.T):
        nxt = soc_step(soc[t], p_b[t], prob.dt_hours, prob.capacity_e)
        snapped = min(max(nxt, 0.0), 1.0)
        if nxt < SNAP_TOL:
            snapped = 0.0
        elif nxt > 1.0 - SNAP_TOL:
            snapped = 1.0
        if snapped != nxt:
            moved = (snapped - soc[t]) * prob.capacity_e / prob.dt_hours
            # a snap that would break the power bound is round-off we keep
            if abs(moved) <= prob.p_max or not 0.0 <= nxt <= 1.0:
                p_b[t] = np.clip(moved, -prob.p_max, prob.p_max)
                nxt = snapped
        soc[t + 1] = nxt
    return p_b, soc


def dispatch_kkt_residual(prob: DispatchProblem, p_b) -> float:
    """Relative KKT residual of a battery schedule, recomputed from scratch.

    Multipliers for the constraints that are tight (within ``ACTIVE_TOL`` of
    their natural scale) are fitted by non-negative least squares.
    """
    if not prob.has_battery:
        return 0.0
    p_b = np.asarray(p_b, dtype=float)
    G, h = prob.constraints()
    scale = prob.constraint_scale()
    c = prob.cost_coefficients()
    grad = 2 * prob.reg * p_b + c
    slack = h - G @ p_b
    viol = float(np.max(np.maximum(-slack / scale, 0.0)))
    active = slack <= ACTIVE_TOL * scale
    if np.any(active):
        _, rnorm = nnls(G[active].T, -grad)
    else:
        rnorm = float(np.linalg.norm(grad))
    return max(viol, rnorm / max(1.0, float(np.max(np.abs(c)))))


def _interior_point(prob: DispatchProblem) -> np.ndarray:
    """Interior-point solve followed by an active-set polish."""
    G, h = prob.constraints()
    scale = prob.constraint_scale()
    # variables in units of p_max keep the interior-point iterates well scaled
    Gs = G * prob.p_max
    Hs = 2 * prob.reg * prob.p_max**2 * np.eye(prob.T)
    cs = prob.cost_coefficients() * prob.p_max
    res = solve_qp(Hs, cs, Gs, h, tol=1e-11)
    x = res.x
    ratio = res.s / np.maximum(res.z, 1e-300)
    rel_slack = (h - Gs @ res.x) / scale
    guesses = [ratio < thr for thr in (1.0, 1e-3, 1e3)] + [rel_slack < thr for thr in (1e-8, 1e-6)]
    for guess in guesses:
        xs = _active_set_polish(Hs, cs, Gs, h, scale, guess)
        if xs is not None:
            x = xs
            break
    return x * prob.p_max


def _least_distance(prob: DispatchProblem) -> np.ndarray:
    """Exact solve as a projection of the unconstrained optimum onto the feasible set.

    With ``H = 2 reg I`` the problem is a least-distance program, which the
    Lawson-Hanson reduction turns into one non-negative least-squares solve.
    Loses accuracy when ``reg`` is tiny relative to the prices.
    """
    G, h = prob.constraints()
    Gs = G * prob.p_max
    x0 = -prob.cost_coefficients() / (2 * prob.reg * prob.p_max)
    # Gs (x0 + d) <= h  written as  -Gs d >= Gs x0 - h
    E = np.vstack([-Gs.T, (Gs @ x0 - h)[None, :]])
    f = np.zeros(E.shape[0])
    f[-1] = 1.0
    u, _ = nnls(E, f, maxiter=50 * E.shape[1])
    r = E @ u - f
    if not abs(r[-1]) > 0:
        raise SolverFailure("least-distance reduction found no feasible point")
    x = x0 - r[:-1] / r[-1]
    # the NNLS passive set is the active set; re-solve on that face exactly
    Hs = 2 * prob.reg * prob.p_max**2 * np.eye(prob.T)
    cs = prob.cost_coefficients() * prob.p_max
    xs = _active_set_polish(Hs, cs, Gs, h, prob.constraint_scale(), u > 0)
    return (x if xs is None else xs) * prob.p_max


def solve_dispatch(prob: DispatchProblem) -> DispatchSolution:
    """Minimize the station's electricity cost over its battery schedule.

    Two solvers are tried, better conditioned first; the first schedule that
    passes the KKT certificate is returned.
    """
    if not prob.has_battery:
        return _idle(prob)

    well_conditioned = prob.reg * prob.p_max >= 1e-3 * max(1.0, float(np.max(np.abs(prob.cost_coefficients()))))
    methods = (_least_distance, _interior_point) if well_conditioned else (_interior_point, _least_distance)
    best_kkt = np.inf
    for method in methods:
        try:
            p_b, soc = _repair(prob, method(prob))
        except (SolverFailure, np.linalg.LinAlgError, RuntimeError):
            continue
        kkt = dispatch_kkt_residual(prob, p_b)
        if kkt <= KKT_TOL:
            p_net = p_b + prob.load
            return DispatchSolution(p_b, soc, p_net, dispatch_cost(prob, p_net), kkt)
        best_kkt = min(best_kkt, kkt)
    raise SolverFailure(f"dispatch KKT residual {best_kkt:.2e} above {KKT_TOL:g}", best_kkt)


def check_feasible(prob: DispatchProblem, sol: DispatchSolution, evolution_tol: float = 1e-12) -> None:
    """Raise AssertionError unless every dispatch invariant holds."""
    assert np.all(sol.soc >= 0.0) and np.all(sol.soc <= 1.0), "SoC out of [0, 1]"
    assert np.all(np.abs(sol.p_b) <= prob.p_max), "battery power above p_max"
    assert sol.soc[0] == prob.soc_init, "initial SoC not respected"
    if prob.has_battery:
        step = sol.soc[:-1] + sol.p_b * prob.dt_hours / prob.capacity_e
        assert np.max(np.abs(step - sol.soc[1:])) <= evolution_tol, "SoC evolution violated"
    else:
        assert np.all(sol.p_b == 0.0)
    assert np.array_equal(sol.p_net, sol.p_b + prob.load), "p_net != p_b + load"


def dispatch_sensitivity(
    prob: DispatchProblem, sol: DispatchSolution, strict: bool = False
) -> SensitivityBlock:
    """Jacobian of the optimal net power with respect to this station's prices.

    Differentiates the regularized KKT system on the manifold cut out by the
    tight constraints.  Constraints that are tight but carry a vanishing
    multiplier make the active set degenerate; they are kept as active, which
    yields a one-sided element, and the block is flagged.
    """
    T = prob.T
    if not prob.has_battery:
        return SensitivityBlock(np.zeros((T, T)), np.zeros(0, dtype=bool))
    G, h = prob.constraints()
    scale = prob.constraint_scale()
    c = prob.cost_coefficients()
    slack = (h - G @ sol.p_b) / scale
    active = slack <= ACTIVE_TOL
    degenerate = False
    if np.any(active):
        grad = 2 * prob.reg * sol.p_b + c
        Ga = G[active]
        z, _ = nnls(Ga.T, -grad)
        mult = z * scale[active] / max(1.0, float(np.max(np.abs(c))))
        degenerate = bool(np.any(mult < ACTIVE_TOL))
        if degenerate and strict:
            raise DegenerateActiveSet("tight constraint with zero multiplier")
        U, sv, Vt = np.linalg.svd(Ga)
        rank = int(np.sum(sv > 1e-10 * sv[0]))
        Z = Vt[rank:].T
    else:
        Z = np.eye(T)
    if Z.shape[1] == 0:
        return SensitivityBlock(np.zeros((T, T)), active, degenerate)
    # H = 2 reg I, dc/dlambda = 1000 dt I
    dc = KWH_PER_MWH * prob.dt_hours
    reduced = np.linalg.inv(Z.T @ (2 * prob.reg * np.eye(T)) @ Z)
    jac = -dc * Z @ reduced @ Z.T
    return SensitivityBlock(jac, active, degenerate)


def dispatch_oracle_dp(prob: DispatchProblem, soc_levels: int = 9, power_levels: int = 5) -> float:
    """Exact optimum of a discretized dispatch problem by dynamic programming.

    Battery power is restricted to ``power_levels`` evenly spaced values in
    ``[-p_max, p_max]`` and the SoC after every step to a uniform grid of
    ``soc_levels`` points on [0, 1] (the initial SoC is its own start state).
    Moves that land off the grid are inadmissible; idling always is.
    """
    if soc_levels < 2 or power_levels < 2:
        raise ValueError("soc_levels and power_levels must be >= 2")
    if prob.T > 16:
        raise TooLarge(f"DP oracle is limited to T <= 16, got {prob.T}")
    coef = prob.cost_coefficients()
    base = float(prob.load @ coef)
    if not prob.has_battery:
        return base

    grid = np.linspace(0.0, 1.0, soc_levels)
    states = np.unique(np.concatenate([grid, [prob.soc_init]]))
    powers = np.linspace(-prob.p_max, prob.p_max, power_levels)
    if not np.any(powers == 0.0):
        powers = np.append(powers, 0.0)
    start = int(np.argmin(np.abs(states - prob.soc_init)))
    n_s = states.size

    # trans[i, a] = index of the state reached from i with power a, or -1
    trans = -np.ones((n_s, powers.size), dtype=int)
    for i, s in enumerate(states):
        nxt = s + powers * prob.dt_hours / prob.capacity_e
        for a, v in enumerate(nxt):
            if powers[a] == 0.0:
                trans[i, a] = i
                continue
            g = int(np.argmin(np.abs(grid - v)))
            if abs(grid[g] - v) <= 1e-9:
                trans[i, a] = int(np.argmin(np.abs(states - grid[g])))

    value = np.zeros(n_s)
    for t in range(prob.T - 1, -1, -1):
        new = np.full(n_s, np.inf)
        for i in range(n_s):
            ok = trans[i] >= 0
            cand = powers[ok] * coef[t] + value[trans[i, ok]]
            if cand.size:
                new[i] = cand.min()
        value = new
    return base + float(value[start])
