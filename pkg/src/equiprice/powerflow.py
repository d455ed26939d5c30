"""AC power flow in polar form, its analytic Jacobian and the voltage-deviation metric."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Network

PINV_RCOND = 1e-10


class PowerFlowError(RuntimeError):
    pass


class SingularOperatingPoint(PowerFlowError):
    pass


class NonConvergence(PowerFlowError):
    def __init__(self, iterations: int, final_mismatch: float, timestep: int | None = None):
        self.iterations = iterations
        self.final_mismatch = final_mismatch
        self.timestep = timestep
        where = "" if timestep is None else f" at timestep {timestep}"
        super().__init__(
            f"power flow did not converge{where}: {iterations} iterations, "
            f"max mismatch {final_mismatch:.3e} p.u."
        )


@dataclass(frozen=True)
class OperatingPoint:
    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))


@dataclass(frozen=True)
class PowerFlowResult:
    op: OperatingPoint
    iterations: int
    max_mismatch: float


@dataclass(frozen=True)
class JacobianBundle:
    """Linearization of the power-flow equations at one operating point.

    ``full`` is the square Jacobian with the slack-angle column and slack real
    power row removed: rows ``[P(non-slack), Q(all)]``, columns
    ``[V(all), theta(non-slack)]``.  ``reduced_cols`` are the columns of
    ``pinv`` that act on real-power changes.
    """

    full: np.ndarray
    pinv: np.ndarray
    reduced_cols: np.ndarray
    op: OperatingPoint
    blocks: dict = field(repr=False)
    p_rows: np.ndarray = field(repr=False)  # bus positions of the P rows

    def price_matrix(self, rows: np.ndarray | None = None) -> np.ndarray:
        """``(J~+)^T J~+`` over the P rows, optionally restricted to bus positions ``rows``."""
        R = self.reduced_cols
        if rows is not None:
            R = R[:, self.p_row_positions(rows)]
        return R.T @ R

    def p_row_positions(self, buses) -> np.ndarray:
        lookup = {int(b): i for i, b in enumerate(self.p_rows)}
        return np.array([lookup[int(b)] for b in buses], dtype=int)


@dataclass(frozen=True)
class InjectionSchedule:
    p: np.ndarray  # n x T, per-unit
    q: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.p, dtype=float))
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        if p.shape != q.shape:
            raise ValueError("p and q schedules must have the same shape")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("injection schedule has non-finite entries")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def T(self) -> int:
        return self.p.shape[1]


@dataclass(frozen=True)
class VoltageTrace:
    v: np.ndarray  # n x T
    theta: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray

    def to_csv(self, path: str | Path, bus_ids=None) -> None:
        """Voltage magnitudes, one row per bus and one column per timestep."""
        n, T = self.v.shape
        ids = list(bus_ids) if bus_ids is not None else list(range(1, n + 1))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bus"] + [f"t{t}" for t in range(T)])
            for b, row in zip(ids, self.v):
                w.writerow([b] + [f"{x:.12g}" for x in row])


def flat_start(net: Network) -> OperatingPoint:
    v = np.ones(net.n)
    v[net.slack] = net.buses[net.slack].v_nominal
    return OperatingPoint(v, np.zeros(net.n))


def nominal_point(net: Network) -> OperatingPoint:
    v, theta = net.nominal_voltages()
    return OperatingPoint(v, theta)


def power_injections(net: Network, op: OperatingPoint) -> tuple[np.ndarray, np.ndarray]:
    """Net real and reactive power at every bus from the polar power-flow equations."""
    G, B = net.admittance
    v, th = op.v, op.theta
    d = th[:, None] - th[None, :]
    c, s = np.cos(d), np.sin(d)
    p = v * ((G * c + B * s) @ v)
    q = v * ((G * s - B * c) @ v)
    return p, q


def ac_residual(net, op, inj_p, inj_q):
    """Scheduled injection minus the injection implied by ``op``."""
    p, q = power_injections(net, op)
    return np.asarray(inj_p, dtype=float) - p, np.asarray(inj_q, dtype=float) - q


def jacobian_blocks(net: Network, op: OperatingPoint) -> dict[str, np.ndarray]:
    """The four n x n blocks dP/dV, dP/dtheta, dQ/dV, dQ/dtheta."""
    G, B = net.admittance
    v, th = op.v, op.theta
    d = th[:, None] - th[None, :]
    c, s = np.cos(d), np.sin(d)
    gc_bs = G * c + B * s
    gs_bc = G * s - B * c

    dP_dV = v[:, None] * gc_bs
    dQ_dV = v[:, None] * gs_bc
    dP_dth = (v[:, None] * v[None, :]) * gs_bc
    dQ_dth = -(v[:, None] * v[None, :]) * gc_bs

    off = ~np.eye(net.n, dtype=bool)
    diag = np.arange(net.n)
    dP_dV[diag, diag] = 2 * v * np.diag(G) + np.where(off, gc_bs, 0.0) @ v
    dQ_dV[diag, diag] = -2 * v * np.diag(B) + np.where(off, gs_bc, 0.0) @ v
    dP_dth[diag, diag] = -v * (np.where(off, gs_bc, 0.0) @ v)
    dQ_dth[diag, diag] = v * (np.where(off, gc_bs, 0.0) @ v)
    return {"dP_dV": dP_dV, "dP_dtheta": dP_dth, "dQ_dV": dQ_dV, "dQ_dtheta": dQ_dth}


def pinv(A: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > rcond * (s[0] if s.size else 0.0)
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def assemble_jacobian(net: Network, op: OperatingPoint) -> JacobianBundle:
    if np.any(op.v <= 0):
        raise SingularOperatingPoint("voltage magnitudes must be positive")
    blocks = jacobian_blocks(net, op)
    ns = net.non_slack
    top = np.hstack([blocks["dP_dV"][ns], blocks["dP_dtheta"][np.ix_(ns, ns)]])
    bottom = np.hstack([blocks["dQ_dV"], blocks["dQ_dtheta"][:, ns]])
    J = np.vstack([top, bottom])
    Jp = pinv(J)
    return JacobianBundle(
        full=J,
        pinv=Jp,
        reduced_cols=Jp[:, : len(ns)],
        op=op,
        blocks=blocks,
        p_rows=ns.copy(),
    )


def solve_power_flow(
    net: Network,
    inj_p,
    inj_q,
    tol: float = 1e-10,
    max_iter: int = 20,
    start: OperatingPoint | None = None,
) -> PowerFlowResult:
    """Newton-Raphson with every non-slack bus treated as PQ.

    The slack bus keeps its voltage magnitude and zero angle and absorbs the
    imbalance.  Raises :class:`NonConvergence` after ``max_iter`` steps or when
    the mismatch grows tenfold over its best value.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    start = start or nominal_point(net)
    v = np.array(start.v, dtype=float)
    th = np.array(start.theta, dtype=float)
    th -= th[net.slack]
    ns = net.non_slack
    m = len(ns)

    best = np.inf
    it = 0
    while True:
        op = OperatingPoint(v.copy(), th.copy())
        dp, dq = ac_residual(net, op, inj_p, inj_q)
        f = np.concatenate([dp[ns], dq[ns]])
        err = float(np.max(np.abs(f))) if f.size else 0.0
        if not np.isfinite(err):
            raise NonConvergence(it, err)
        if err < tol:
            break
        best = min(best, err)
        if it >= max_iter or err > 10 * best:
            raise NonConvergence(it, err)
        if np.any(v <= 0):
            raise NonConvergence(it, err)
        jb = jacobian_blocks(net, op)
        J = np.block(
            [
                [jb["dP_dV"][np.ix_(ns, ns)], jb["dP_dtheta"][np.ix_(ns, ns)]],
                [jb["dQ_dV"][np.ix_(ns, ns)], jb["dQ_dtheta"][np.ix_(ns, ns)]],
            ]
        )
        try:
            dx = np.linalg.solve(J, f)
        except np.linalg.LinAlgError:
            raise NonConvergence(it, err) from None
        v[ns] += dx[:m]
        th[ns] += dx[m:]
        it += 1

    # certificate: recompute on the returned point over every non-slack bus
    dp, dq = ac_residual(net, op, inj_p, inj_q)
    err = float(max(np.max(np.abs(dp[ns])), np.max(np.abs(dq[ns])))) if m else 0.0
    if not err < tol:
        raise NonConvergence(it, err)
    return PowerFlowResult(op, it, err)


def linearize_horizon(
    net: Network,
    schedule: InjectionSchedule,
    initial_op: OperatingPoint | None = None,
    tol: float = 1e-10,
    max_iter: int = 20,
) -> list[JacobianBundle]:
    """One bundle per timestep; bundle ``t`` linearizes around the solved point of ``t - 1``."""
    initial_op = initial_op or nominal_point(net)
    bundles = [assemble_jacobian(net, initial_op)]
    warm = initial_op
    for t in range(1, schedule.T):
        try:
            warm = solve_power_flow(
                net, schedule.p[:, t - 1], schedule.q[:, t - 1], tol, max_iter, start=warm
            ).op
        except NonConvergence as exc:
            raise NonConvergence(exc.iterations, exc.final_mismatch, t - 1) from None
        bundles.append(assemble_jacobian(net, warm))
    return bundles


def deviation_vector(bundle: JacobianBundle, dp, dq) -> np.ndarray:
    """``J+ [dP; dQ]`` with the slack real-power entry dropped."""
    dp = np.asarray(dp, dtype=float)
    dq = np.asarray(dq, dtype=float)
    return bundle.pinv @ np.concatenate([dp[bundle.p_rows], dq])


def voltage_deviation(bundle: JacobianBundle, dp, dq) -> float:
    x = deviation_vector(bundle, dp, dq)
    return float(x @ x)


def frobenius_deviation(v: np.ndarray) -> float:
    """Frobenius norm of the timestep-to-timestep voltage magnitude changes."""
    v = np.asarray(v, dtype=float)
    if v.shape[1] < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(v, axis=1)))


def simulate_horizon(
    net: Network,
    schedule: InjectionSchedule,
    tol: float = 1e-10,
    max_iter: int = 20,
    start: OperatingPoint | None = None,
) -> tuple[VoltageTrace, float]:
    n, T = schedule.p.shape
    v = np.empty((n, T))
    th = np.empty((n, T))
    iters = np.zeros(T, dtype=int)
    warm = start or nominal_point(net)
    for t in range(T):
        try:
            res = solve_power_flow(net, schedule.p[:, t], schedule.q[:, t], tol, max_iter, start=warm)
        except NonConvergence as exc:
            raise NonConvergence(exc.iterations, exc.final_mismatch, t) from None
        warm = res.op
        v[:, t] = res.op.v
        th[:, t] = res.op.theta
        iters[t] = res.iterations
    trace = VoltageTrace(v, th, np.ones(T, dtype=bool), iters)
    return trace, frobenius_deviation(v)
