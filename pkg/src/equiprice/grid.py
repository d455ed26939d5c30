"""Network, station and load-profile data plus ingestion.

All power quantities on :class:`Bus` are kept in MW / MVAr as written in the
case file; per-unit conversion happens in :meth:`Network.injections`.  Net
injections follow the generation-minus-load convention, so loads enter
negatively everywhere downstream.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SLACK = "slack"
PQ = "PQ"


class GridError(ValueError):
    """Base class for invalid network or profile input."""


class MalformedFile(GridError):
    pass


class MissingSlack(GridError):
    pass


class DuplicateSlack(MissingSlack):
    """More than one slack bus: the single-slack invariant is violated."""


class DuplicateBusId(GridError):
    pass


class DanglingLineEndpoint(GridError):
    pass


class RaggedRow(GridError):
    pass


class NegativeLoad(GridError):
    pass


class UnknownStation(GridError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    base_load_p: float = 0.0
    base_load_q: float = 0.0
    base_gen_p: float = 0.0
    base_gen_q: float = 0.0
    v_nominal: float = 1.0
    theta_nominal: float = 0.0
    b_shunt: float = 0.0  # per-unit, fixed shunt at the bus

    def __post_init__(self):
        if self.kind not in (SLACK, PQ):
            raise MalformedFile(f"bus {self.id}: unknown kind {self.kind!r}")
        if not self.v_nominal > 0:
            raise MalformedFile(f"bus {self.id}: v_nom must be positive")


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    conductance_g: float
    susceptance_b: float
    b_shunt: float = 0.0  # total line charging, split half per end

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise MalformedFile(f"line {self.from_bus}-{self.to_bus}: endpoints must differ")


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...] = ()
    base_mva: float = 100.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        seen = set()
        for bus in self.buses:
            if bus.id in seen:
                raise DuplicateBusId(f"bus id {bus.id} appears more than once")
            seen.add(bus.id)
        slacks = [b.id for b in self.buses if b.kind == SLACK]
        if not slacks:
            raise MissingSlack("network has no slack bus")
        if len(slacks) > 1:
            raise DuplicateSlack(f"network has {len(slacks)} slack buses: {slacks}")
        for line in self.lines:
            for end in (line.from_bus, line.to_bus):
                if end not in seen:
                    raise DanglingLineEndpoint(
                        f"line {line.from_bus}-{line.to_bus} references unknown bus {end}"
                    )
        if not self.base_mva > 0:
            raise MalformedFile("base_mva must be positive")

    @property
    def n(self) -> int:
        return len(self.buses)

    @cached_property
    def index(self) -> dict[int, int]:
        """Bus id -> row position."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack(self) -> int:
        """Row position of the slack bus."""
        return next(i for i, b in enumerate(self.buses) if b.kind == SLACK)

    @cached_property
    def non_slack(self) -> np.ndarray:
        return np.array([i for i in range(self.n) if i != self.slack], dtype=int)

    @cached_property
    def admittance(self) -> tuple[np.ndarray, np.ndarray]:
        return build_admittance(self)

    def injections(self) -> tuple[np.ndarray, np.ndarray]:
        """Time-invariant base-case net injections (p, q) in per-unit."""
        p = np.array([b.base_gen_p - b.base_load_p for b in self.buses]) / self.base_mva
        q = np.array([b.base_gen_q - b.base_load_q for b in self.buses]) / self.base_mva
        return p, q

    def nominal_voltages(self) -> tuple[np.ndarray, np.ndarray]:
        v = np.array([b.v_nominal for b in self.buses], dtype=float)
        theta = np.array([b.theta_nominal for b in self.buses], dtype=float)
        theta = theta - theta[self.slack]
        return v, theta


@dataclass(frozen=True)
class StationConfig:
    """An EV charging station with a collocated battery.

    ``p_max`` defaults to the 1C rate, i.e. numerically equal to the energy
    capacity delivered over one hour.
    """

    station_id: int
    bus_id: int
    capacity_e: float
    soc_init: float
    p_max: float | None = None

    def __post_init__(self):
        if self.capacity_e < 0:
            raise GridError(f"station {self.station_id}: capacity_e must be >= 0")
        if not 0.0 <= self.soc_init <= 1.0:
            raise GridError(f"station {self.station_id}: soc_init must lie in [0, 1]")
        if self.p_max is None:
            object.__setattr__(self, "p_max", float(self.capacity_e))
        elif self.p_max < 0:
            raise GridError(f"station {self.station_id}: p_max must be >= 0")


@dataclass(frozen=True)
class LoadForecast:
    station_id: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        if np.any(values < 0):
            raise NegativeLoad(f"station {self.station_id}: negative load value")
        object.__setattr__(self, "values", values)

    @property
    def T(self) -> int:
        return len(self.values)


def build_admittance(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit conductance and susceptance matrices ``(G, B)``.

    Off-diagonal entries are the negated series admittance of each line,
    diagonals the sum of incident series admittances plus any shunts.
    """
    n = net.n
    G = np.zeros((n, n))
    B = np.zeros((n, n))
    idx = net.index
    for line in net.lines:
        i, k = idx[line.from_bus], idx[line.to_bus]
        g, b = line.conductance_g, line.susceptance_b
        G[i, k] -= g
        G[k, i] -= g
        B[i, k] -= b
        B[k, i] -= b
        G[i, i] += g
        G[k, k] += g
        B[i, i] += b + line.b_shunt / 2
        B[k, k] += b + line.b_shunt / 2
    for i, bus in enumerate(net.buses):
        B[i, i] += bus.b_shunt
    return G, B


def _network_from_dict(data: dict, source: str) -> Network:
    try:
        base_mva = float(data.get("base_mva", 100.0))
        raw_buses = data["buses"]
        raw_lines = data.get("lines", [])
    except (KeyError, TypeError, AttributeError) as exc:
        raise MalformedFile(f"{source}: missing top-level key {exc}") from None

    buses = []
    for pos, rec in enumerate(raw_buses):
        try:
            buses.append(
                Bus(
                    id=int(rec["id"]),
                    kind=SLACK if str(rec["kind"]).lower() == SLACK else str(rec["kind"]),
                    base_load_p=float(rec.get("p_load", 0.0)),
                    base_load_q=float(rec.get("q_load", 0.0)),
                    base_gen_p=float(rec.get("p_gen", 0.0)),
                    base_gen_q=float(rec.get("q_gen", 0.0)),
                    v_nominal=float(rec.get("v_nom", 1.0)),
                    theta_nominal=float(rec.get("theta_nom", 0.0)),
                    b_shunt=float(rec.get("b_shunt", 0.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, GridError):
                raise
            raise MalformedFile(f"{source}: bus record #{pos} is malformed ({exc})") from None

    lines = []
    for pos, rec in enumerate(raw_lines):
        try:
            lines.append(
                Line(
                    from_bus=int(rec["from"]),
                    to_bus=int(rec["to"]),
                    conductance_g=float(rec["g"]),
                    susceptance_b=float(rec["b"]),
                    b_shunt=float(rec.get("b_shunt", 0.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, GridError):
                raise
            raise MalformedFile(f"{source}: line record #{pos} is malformed ({exc})") from None

    if len(buses) < 2:
        raise MalformedFile(f"{source}: a network needs at least two buses")
    return Network(tuple(buses), tuple(lines), base_mva, str(data.get("name", "")))


def parse_case(path: str | Path) -> Network:
    """Load a JSON case file into a validated :class:`Network`."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: not valid JSON ({exc})") from None
    return _network_from_dict(data, str(path))


def network_to_dict(net: Network) -> dict:
    buses = []
    for b in net.buses:
        rec = {
            "id": b.id,
            "kind": b.kind,
            "p_load": b.base_load_p,
            "q_load": b.base_load_q,
            "p_gen": b.base_gen_p,
            "q_gen": b.base_gen_q,
            "v_nom": b.v_nominal,
            "theta_nom": b.theta_nominal,
        }
        if b.b_shunt:
            rec["b_shunt"] = b.b_shunt
        buses.append(rec)
    lines = []
    for ln in net.lines:
        rec = {"from": ln.from_bus, "to": ln.to_bus, "g": ln.conductance_g, "b": ln.susceptance_b}
        if ln.b_shunt:
            rec["b_shunt"] = ln.b_shunt
        lines.append(rec)
    out = {"base_mva": net.base_mva, "buses": buses, "lines": lines}
    if net.name:
        out["name"] = net.name
    return out


def write_case(net: Network, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")


def parse_profiles(
    path: str | Path, T: int, station_ids: Iterable[int] | None = None
) -> list[LoadForecast]:
    """Read a ``station_id,t0,...,t{T-1}`` CSV of MW demand."""
    known = None if station_ids is None else set(station_ids)
    forecasts = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "station_id":
            raise MalformedFile(f"{path}: header must start with 'station_id'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) - 1 != T:
                raise RaggedRow(f"{path}:{lineno}: expected {T} values, got {len(row) - 1}")
            try:
                sid = int(row[0])
                values = [float(x) for x in row[1:]]
            except ValueError as exc:
                raise MalformedFile(f"{path}:{lineno}: {exc}") from None
            if known is not None and sid not in known:
                raise UnknownStation(f"{path}:{lineno}: station {sid} is not configured")
            if any(v < 0 for v in values):
                raise NegativeLoad(f"{path}:{lineno}: station {sid} has a negative load")
            forecasts.append(LoadForecast(sid, np.array(values)))
    return forecasts


def write_profiles(forecasts: Sequence[LoadForecast], path: str | Path) -> None:
    T = forecasts[0].T if forecasts else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id"] + [f"t{t}" for t in range(T)])
        for fc in forecasts:
            w.writerow([fc.station_id] + [repr(float(x)) for x in fc.values])


def synth_profiles(
    seed: int,
    stations: Sequence[StationConfig],
    peak_mw: float | Sequence[float],
    T: int = 96,
    sessions: int = 24,
) -> list[LoadForecast]:
    """Seeded synthetic EV charging demand.

    Each profile is a sum of Gaussian-bump charging sessions with arrival
    times concentrated around the morning and evening commute, clipped at zero
    and rescaled so its maximum equals the station's ``peak_mw``.  Each station
    draws from its own stream keyed by ``(seed, station_id)``.
    """
    peaks = np.broadcast_to(np.asarray(peak_mw, dtype=float), (len(stations),))
    hours = (np.arange(T) + 0.5) * 24.0 / T
    out = []
    for st, peak in zip(stations, peaks):
        rng = np.random.default_rng([seed, st.station_id])
        evening = rng.random(sessions) < 0.6
        centers = np.where(
            evening, rng.normal(18.0, 2.0, sessions), rng.normal(8.5, 1.5, sessions)
        ) % 24.0
        widths = rng.uniform(0.4, 1.5, sessions)
        heights = rng.uniform(0.3, 1.0, sessions)
        dist = np.abs(hours[None, :] - centers[:, None])
        dist = np.minimum(dist, 24.0 - dist)
        profile = np.clip((heights[:, None] * np.exp(-0.5 * (dist / widths[:, None]) ** 2)).sum(0), 0, None)
        top = profile.max()
        if peak <= 0 or top <= 0:
            profile = np.zeros(T)
        else:
            profile = profile * (peak / top)
            profile[np.argmax(profile)] = peak
        out.append(LoadForecast(st.station_id, profile))
    return out
