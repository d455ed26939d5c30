"""Economic burden and the min-minus-max equity measure over station prices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PriceMatrix:
    """K x T prices in $/kWh, one row per charging station."""

    values: np.ndarray
    station_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        values = np.atleast_2d(np.array(self.values, dtype=float))
        if not np.all(np.isfinite(values)):
            raise ValueError("price matrix has non-finite entries")
        ids = tuple(self.station_ids) or tuple(range(values.shape[0]))
        if len(ids) != values.shape[0]:
            raise ValueError("station_ids must have one entry per row")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "station_ids", ids)

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def row(self, station_id: int) -> np.ndarray:
        return self.values[self.station_ids.index(station_id)]


def _values(prices) -> np.ndarray:
    return prices.values if isinstance(prices, PriceMatrix) else np.atleast_2d(np.asarray(prices, dtype=float))


def burden(prices) -> np.ndarray:
    """Per-station sum of prices over the horizon."""
    return _values(prices).sum(axis=1)


def gamma(prices) -> float:
    """Equity: smallest station burden minus largest.  Always <= 0."""
    b = burden(prices)
    return float(b.min() - b.max())


def gamma_subgradient(prices) -> np.ndarray:
    """A subgradient of ``-gamma`` (max burden minus min burden) w.r.t. the prices.

    Ones on the row of the largest burden, minus ones on the row of the
    smallest; ties go to the lowest station index.  Zero when all burdens tie.
    """
    vals = _values(prices)
    b = vals.sum(axis=1)
    g = np.zeros_like(vals)
    hi, lo = int(np.argmax(b)), int(np.argmin(b))
    if b[hi] == b[lo]:
        return g
    g[hi] += 1.0
    g[lo] -= 1.0
    return g


@dataclass(frozen=True)
class EpigraphTerms:
    """Linear encoding of ``-gamma`` for a convex program.

    With burdens ``b`` and two auxiliary scalars ``u`` (upper) and ``l``
    (lower), the constraints ``b_k - u <= 0`` and ``l - b_k <= 0`` for every
    station together with the objective term ``u - l`` reproduce
    ``max(b) - min(b)`` at the optimum.
    """

    K: int

    def objective(self) -> np.ndarray:
        """Coefficients on ``(u, l)``."""
        return np.array([1.0, -1.0])

    def constraints(self, burden_map: np.ndarray, burden_offset: np.ndarray):
        """Rows ``[A_x | A_ul] [x; u; l] <= h`` for burdens ``b = burden_map @ x + burden_offset``."""
        burden_map = np.atleast_2d(burden_map)
        ones = np.ones((self.K, 1))
        zeros = np.zeros((self.K, 1))
        A = np.vstack(
            [
                np.hstack([burden_map, -ones, zeros]),
                np.hstack([-burden_map, zeros, ones]),
            ]
        )
        h = np.concatenate([-burden_offset, burden_offset])
        return A, h

    def feasible_point(self, burdens) -> tuple[float, float]:
        b = np.asarray(burdens, dtype=float)
        return float(b.max()), float(b.min())


def gamma_epigraph_terms(K: int) -> EpigraphTerms:
    if K < 1:
        raise ValueError("K must be >= 1")
    return EpigraphTerms(K)
