"""Scenario files, the time-of-use baseline and end-to-end method comparisons."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .equity import PriceMatrix, gamma
from .grid import GridError, LoadForecast, Network, StationConfig, parse_case, parse_profiles, synth_profiles
from .icd import IcdConfig, run_icd
from .pda import StationSystem
from .powerflow import PowerFlowError, VoltageTrace, simulate_horizon
from .qp import SolverFailure
from .sdid import SdidConfig, SdidTrace, run_sdid

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent / "data"
METHODS = ("tou", "icd", "sdid")


class ScenarioError(ValueError):
    """A scenario or schedule file that cannot be used."""


DOMAIN_ERRORS = (GridError, PowerFlowError, SolverFailure, ScenarioError)


def _load_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def resolve_path(name: str | Path, base: Path | None = None) -> Path:
    """Absolute path for ``name``: as given, next to ``base``, or among the shipped data files."""
    p = Path(name)
    if p.is_absolute():
        return p
    for root in ([base] if base is not None else []) + [Path.cwd(), DATA_DIR]:
        if (root / p).exists():
            return (root / p).resolve()
    return (base / p) if base is not None else p


@dataclass(frozen=True)
class TouSchedule:
    """Piecewise-constant daily tariff: ``(start_hour, end_hour, price)`` periods covering 24 h."""

    breakpoints: tuple[tuple[float, float, float], ...]
    name: str = ""

    def __post_init__(self):
        periods = tuple(sorted((float(a), float(b), float(p)) for a, b, p in self.breakpoints))
        if not periods:
            raise ScenarioError("TOU schedule has no periods")
        edge = 0.0
        for a, b, p in periods:
            if a != edge:
                raise ScenarioError(f"TOU schedule has a gap or overlap at hour {edge:g}")
            if not b > a:
                raise ScenarioError(f"TOU period [{a:g}, {b:g}) is empty")
            if p < 0:
                raise ScenarioError(f"TOU period [{a:g}, {b:g}) has a negative price")
            edge = b
        if edge != 24.0:
            raise ScenarioError(f"TOU schedule ends at hour {edge:g}, not 24")
        object.__setattr__(self, "breakpoints", periods)

    @classmethod
    def from_file(cls, path: str | Path) -> "TouSchedule":
        path = Path(path)
        data = _load_toml(path)
        try:
            periods = [(p["start"], p["end"], p["price"]) for p in data["period"]]
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"{path}: every [[period]] needs start, end and price ({exc})") from None
        return cls(tuple(periods), str(data.get("name", "")))

    @classmethod
    def flat(cls, price: float) -> "TouSchedule":
        return cls(((0.0, 24.0, price),), "flat")

    def period_index(self, T: int, dt_hours: float) -> np.ndarray:
        """Which period each timestep starts in."""
        start = np.arange(T) * dt_hours % 24.0
        ends = np.array([b for _, b, _ in self.breakpoints])
        return np.searchsorted(ends, start, side="right")

    def expand(self, T: int, dt_hours: float) -> np.ndarray:
        prices = np.array([p for _, _, p in self.breakpoints])
        return prices[self.period_index(T, dt_hours)]


def random_tou_prices(seed: int, K: int, schedule: TouSchedule, T: int, dt_hours: float,
                      low: float = 0.1, high: float = 0.5) -> np.ndarray:
    """Random prices that keep the tariff's periods: one uniform draw per station and period."""
    levels = np.random.default_rng(seed).uniform(low, high, size=(K, len(schedule.breakpoints)))
    return levels[:, schedule.period_index(T, dt_hours)]


@dataclass(frozen=True)
class Scenario:
    name: str
    network_path: Path
    stations: tuple[StationConfig, ...]
    profiles: dict
    tou_path: Path
    icd: IcdConfig
    sdid: SdidConfig
    T: int = 96
    dt_hours: float = 0.25
    seed: int = 0
    dispatch_reg: float = 1e-6
    sdid_init: str = "uniform"
    source: Path | None = None

    def __post_init__(self):
        if abs(self.T * self.dt_hours - 24.0) > 1e-9:
            raise ScenarioError(f"horizon must cover 24 h, got T*dt = {self.T * self.dt_hours:g} h")
        if self.sdid_init not in ("uniform", "tou"):
            raise ScenarioError(f"sdid init must be 'uniform' or 'tou', got {self.sdid_init!r}")
        ids = [st.station_id for st in self.stations]
        if len(set(ids)) != len(ids):
            raise ScenarioError("station ids must be unique")
        if not self.stations:
            raise ScenarioError("scenario has no stations")

    def network(self) -> Network:
        net = parse_case(self.network_path)
        for st in self.stations:
            if st.bus_id not in net.index:
                raise ScenarioError(f"station {st.station_id} sits on bus {st.bus_id}, which is not in the network")
        return net

    def forecasts(self) -> list[LoadForecast]:
        src = self.profiles
        if src.get("source", "synth") == "synth":
            return synth_profiles(int(src.get("seed", self.seed)), self.stations, float(src.get("peak_mw", 2.0)), self.T)
        base = self.source.parent if self.source is not None else None
        path = resolve_path(src["path"], base)
        return parse_profiles(path, self.T, [st.station_id for st in self.stations])

    def system(self) -> StationSystem:
        return StationSystem.from_forecasts(
            self.network(), self.stations, self.forecasts(), self.dt_hours, self.dispatch_reg
        )

    def tou(self) -> TouSchedule:
        return TouSchedule.from_file(self.tou_path)


def _pick(table: dict, cls, keys: Sequence[str], where: str):
    unknown = set(table) - set(keys)
    if unknown:
        raise ScenarioError(f"[{where}] has unknown keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**{k: table[k] for k in keys if k in table})
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"[{where}]: {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    path = resolve_path(path)
    data = _load_toml(path)
    base = path.parent
    try:
        stations = tuple(
            StationConfig(int(s["id"]), int(s["bus"]), float(s["capacity_mwh"]), float(s["soc_init"]),
                          None if "p_max_mw" not in s else float(s["p_max_mw"]))
            for s in data["stations"]
        )
    except KeyError as exc:
        raise ScenarioError(f"{path}: station entry is missing {exc}") from None
    pricing = data.get("pricing", {})
    seed = int(data.get("seed", 0))
    icd_tab = dict(pricing.get("icd", {}))
    icd_tab.setdefault("seed", seed)
    icd = _pick(icd_tab, IcdConfig, ("alpha", "beta", "max_outer_iters", "price_tol", "kkt_tol", "price_scale", "seed"), "pricing.icd")
    sdid_tab = dict(pricing.get("sdid", {}))
    sdid_init = sdid_tab.pop("init", "uniform")
    sdid_tab.setdefault("seed", seed)
    sdid = _pick(sdid_tab, SdidConfig, ("alpha", "beta", "eta_init", "gamma_decay", "decay", "n_iters", "seed", "fd_check"), "pricing.sdid")
    tou_name = pricing.get("tou", {}).get("schedule", "tou_bev.toml")
    return Scenario(
        name=str(data.get("name", path.stem)),
        network_path=resolve_path(data.get("network", "ieee14.json"), base),
        stations=stations,
        profiles=dict(data.get("profiles", {"source": "synth"})),
        tou_path=resolve_path(tou_name, base),
        icd=icd,
        sdid=sdid,
        T=int(data.get("T", 96)),
        dt_hours=float(data.get("dt_hours", 0.25)),
        seed=seed,
        dispatch_reg=float(data.get("dispatch_reg", 1e-6)),
        sdid_init=sdid_init,
        source=path,
    )


def with_seed(scenario: Scenario, seed: int) -> Scenario:
    """The same scenario with every random stream reseeded."""
    profiles = dict(scenario.profiles)
    if profiles.get("source", "synth") == "synth":
        profiles["seed"] = seed
    return replace(
        scenario, seed=seed, profiles=profiles, icd=replace(scenario.icd, seed=seed), sdid=replace(scenario.sdid, seed=seed)
    )


@dataclass
class ScenarioResult:
    method: str
    deviation: float = float("nan")
    gamma: float = float("nan")
    prices: PriceMatrix | None = None
    p_net: np.ndarray | None = field(default=None, repr=False)
    voltages: VoltageTrace | None = field(default=None, repr=False)
    iters: int = 0
    ms_per_iter: float = float("nan")
    error: str | None = None
    voltages_path: Path | None = None
    sdid_trace: SdidTrace | None = field(default=None, repr=False)
    icd_log: list[dict] = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None


def evaluate_schedule(system: StationSystem, p_net: np.ndarray) -> tuple[VoltageTrace, float]:
    """The single nonlinear voltage metric every method is scored with."""
    return simulate_horizon(system.net, system.schedule(p_net))


def _score(method: str, system: StationSystem, prices: np.ndarray, p_net: np.ndarray, **extra) -> ScenarioResult:
    trace, dev = evaluate_schedule(system, p_net)
    pm = PriceMatrix(prices, system.station_ids)
    return ScenarioResult(method, dev, gamma(pm), pm, np.asarray(p_net), trace, **extra)


def run_baseline_tou(scenario: Scenario, schedule: TouSchedule | None = None,
                     system: StationSystem | None = None) -> ScenarioResult:
    system = system or scenario.system()
    schedule = schedule or scenario.tou()
    t0 = time.perf_counter()
    prices = np.tile(schedule.expand(system.T, system.dt_hours), (system.K, 1))
    p_net = np.array([d.p_net for d in system.dispatch_all(prices)])
    ms = (time.perf_counter() - t0) * 1e3
    return _score("tou", system, prices, p_net, iters=1, ms_per_iter=ms)


def run_icd_method(scenario: Scenario, system: StationSystem | None = None) -> ScenarioResult:
    system = system or scenario.system()
    sol = run_icd(system, scenario.icd)
    return _score(
        "icd", system, sol.prices.values, np.array([d.p_net for d in sol.dispatches]),
        iters=sol.outer_iters, ms_per_iter=float(np.mean(sol.inner_ms)), icd_log=sol.log,
    )


def sdid_initial_prices(scenario: Scenario, system: StationSystem) -> np.ndarray | None:
    if scenario.sdid_init == "tou":
        return random_tou_prices(scenario.sdid.seed, system.K, scenario.tou(), system.T, system.dt_hours)
    return None


def run_sdid_method(scenario: Scenario, system: StationSystem | None = None) -> ScenarioResult:
    system = system or scenario.system()
    prices, trace = run_sdid(system, scenario.sdid, sdid_initial_prices(scenario, system))
    p_net = np.array([d.p_net for d in system.dispatch_all(prices.values)])
    ms = float(np.mean([r.wall_ms for r in trace.records])) if trace.records else float("nan")
    return _score("sdid", system, prices.values, p_net, iters=len(trace), ms_per_iter=ms, sdid_trace=trace)


RUNNERS = {"tou": run_baseline_tou, "icd": run_icd_method, "sdid": run_sdid_method}


def run_compare(scenario: Scenario, methods: Sequence[str] = METHODS) -> list[ScenarioResult]:
    """Run every method on the same network, loads and batteries.

    A method that fails yields a result carrying the error; the others still run.
    """
    system = scenario.system()
    results = []
    for m in methods:
        try:
            results.append(RUNNERS[m](scenario, system=system))
        except DOMAIN_ERRORS as exc:
            log.warning("%s failed: %s", m, exc)
            results.append(ScenarioResult(m, error=f"{type(exc).__name__}: {exc}"))
    return results


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def write_price_csv(prices: PriceMatrix, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id"] + [f"t{t}" for t in range(prices.T)])
        for sid, row in zip(prices.station_ids, prices.values):
            w.writerow([sid] + [_fmt(x) for x in row])


def write_results(results: Sequence[ScenarioResult], out: str | Path, net: Network, scenario: Scenario | None = None) -> dict:
    """Write every artifact for ``results`` into ``out``; return the JSON summary.

    CSVs hold only deterministic quantities; wall-clock timings go to
    ``summary.json``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    bus_ids = [b.id for b in net.buses]
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "deviation_pu", "gamma", "iters", "status"])
        for r in results:
            if r.ok:
                w.writerow([r.method, _fmt(r.deviation), _fmt(r.gamma), r.iters, "ok"])
            else:
                w.writerow([r.method, "", "", "", r.error])
    for r in results:
        if not r.ok:
            continue
        write_price_csv(r.prices, out / f"prices_{r.method}.csv")
        r.voltages_path = out / f"voltages_{r.method}.csv"
        r.voltages.to_csv(r.voltages_path, bus_ids)
        if r.sdid_trace is not None:
            r.sdid_trace.to_csv(out / f"trace_{r.method}.csv")
        if r.icd_log:
            with open(out / f"{r.method}_log.jsonl", "w") as fh:
                for rec in r.icd_log:
                    fh.write(json.dumps(rec) + "\n")
    summary = {
        "scenario": scenario.name if scenario is not None else None,
        "methods": {
            r.method: {
                "deviation_pu": r.deviation if r.ok else None,
                "gamma": r.gamma if r.ok else None,
                "iters": r.iters,
                "ms_per_iter": r.ms_per_iter if r.ok else None,
                "error": r.error,
            }
            for r in results
        },
    }
    tou = next((r for r in results if r.method == "tou" and r.ok), None)
    if tou is not None and tou.deviation > 0:
        for r in results:
            if r.ok and r.method != "tou":
                summary["methods"][r.method]["reduction_vs_tou"] = 1.0 - r.deviation / tou.deviation
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def format_table(results: Sequence[ScenarioResult]) -> str:
    lines = [f"{'method':<6} {'deviation_pu':>13} {'gamma':>12} {'iters':>6} {'ms/iter':>9}"]
    for r in results:
        if r.ok:
            lines.append(f"{r.method:<6} {r.deviation:>13.6g} {r.gamma:>12.4g} {r.iters:>6d} {r.ms_per_iter:>9.1f}")
        else:
            lines.append(f"{r.method:<6} failed: {r.error}")
    return "\n".join(lines)
