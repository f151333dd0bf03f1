"""Shared domain types and the storage/shortfall primitives.

Units are fixed package-wide: power in GW, energy in GWh, time in hours.
All types here are immutable values; the operations are pure functions,
so everything may be shared freely across parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

HOURS_PER_YEAR = 8760.0

#: slack allowed on state-feasibility checks (GW / GWh); far below 1 GW decisions
ENERGY_TOL = 1e-9


class StorsizeError(Exception):
    """Base class for all package errors."""


class DimensionError(StorsizeError):
    """Traces or arrays that must align do not."""


class ParameterError(StorsizeError):
    """A value is outside its admissible range."""


class DataError(StorsizeError):
    """An input file is missing or malformed."""


class ConfigError(StorsizeError):
    """One or more configuration violations; ``violations`` lists all of them."""

    def __init__(self, violations: Sequence[tuple[str, str]]):
        self.violations = list(violations)
        lines = [f"{ptr}: {msg}" for ptr, msg in self.violations]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))


class SolverError(StorsizeError):
    """The QP solver failed to converge; carries residual diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InfeasibleStepError(StorsizeError):
    """A storage state update would leave the admissible energy range."""


class InternalConsistencyError(StorsizeError):
    """A post-solve check failed; indicates a bug, not bad user input."""


class StudyError(StorsizeError):
    """A study-level failure (e.g. samples exceeding the bisection range)."""


class MonotonicityError(StudyError):
    """The fail/success pattern at a bisection interval is inconsistent."""


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Fixed-step trace of power values (GW) with sample period ``dt_hours``."""

    values: np.ndarray
    dt_hours: float = 1.0

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim != 1:
            raise ParameterError("TimeSeries values must be one-dimensional")
        if arr.size and not np.all(np.isfinite(arr)):
            raise ParameterError("TimeSeries values must be finite")
        if not (self.dt_hours > 0.0 and math.isfinite(self.dt_hours)):
            raise ParameterError(f"dt_hours must be positive, got {self.dt_hours}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def annual(cls, values, dt_hours: float = 1.0) -> "TimeSeries":
        """Construct a one-year trace; rejects lengths that do not tile 8760 h."""
        k = HOURS_PER_YEAR / dt_hours
        if abs(k - round(k)) > 1e-9:
            raise ParameterError(
                f"8760 h is not an integer number of {dt_hours} h steps"
            )
        ts = cls(values, dt_hours)
        if len(ts) != round(k):
            raise ParameterError(
                f"annual trace needs {round(k)} samples at dt={dt_hours} h, "
                f"got {len(ts)}"
            )
        return ts

    @property
    def is_annual(self) -> bool:
        return abs(len(self) * self.dt_hours - HOURS_PER_YEAR) < 1e-6

    def __len__(self) -> int:
        return int(self.values.size)

    def __getitem__(self, k: int) -> float:
        return float(self.values[k])


@dataclass(frozen=True)
class NetworkModel:
    """Nodes and undirected edges with transfer capacities (GW)."""

    nodes: tuple[tuple[int, str], ...]
    edges: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self) -> None:
        ids = [nid for nid, _ in self.nodes]
        if len(set(ids)) != len(ids):
            raise ParameterError("duplicate node ids")
        if not ids:
            raise ParameterError("network needs at least one node")
        declared = set(ids)
        seen_pairs: set[frozenset[int]] = set()
        for a, b, cap in self.edges:
            if a == b:
                raise ParameterError(f"self-loop on node {a}")
            if a not in declared or b not in declared:
                raise ParameterError(f"edge ({a},{b}) references undeclared node")
            pair = frozenset((a, b))
            if pair in seen_pairs:
                raise ParameterError(f"duplicate edge between {a} and {b}")
            seen_pairs.add(pair)
            if cap < 0.0:
                raise ParameterError(f"edge ({a},{b}) capacity must be >= 0")

    @classmethod
    def single_node(cls, name: str = "system") -> "NetworkModel":
        return cls(nodes=((0, name),))

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(nid for nid, _ in self.nodes)

    def node_index(self, node_id: int) -> int:
        for i, (nid, _) in enumerate(self.nodes):
            if nid == node_id:
                return i
        raise ParameterError(f"unknown node id {node_id}")

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Edge endpoints as node indices plus capacities, for the dispatch kernel."""
        a = np.array([self.node_index(e[0]) for e in self.edges], dtype=np.int32)
        b = np.array([self.node_index(e[1]) for e in self.edges], dtype=np.int32)
        cap = np.array([e[2] for e in self.edges], dtype=np.float64)
        return a, b, cap


@dataclass(frozen=True)
class StorageUnit:
    """One storage device: symmetric power rating, extractable-energy state."""

    node_id: int
    p_max_gw: float
    e_max_gwh: float
    e_gwh: float
    eta: float = 1.0

    def __post_init__(self) -> None:
        if not self.p_max_gw > 0.0:
            raise ParameterError("p_max_gw must be positive")
        if not self.e_max_gwh > 0.0:
            raise ParameterError("e_max_gwh must be positive")
        if not (0.0 < self.eta <= 1.0):
            raise ParameterError("eta must be in (0, 1]")
        e = self.e_gwh
        if e < -ENERGY_TOL or e > self.e_max_gwh + ENERGY_TOL:
            raise ParameterError(
                f"stored energy {e} outside [0, {self.e_max_gwh}]"
            )
        object.__setattr__(self, "e_gwh", min(max(e, 0.0), self.e_max_gwh))


@dataclass(frozen=True)
class FleetState:
    """The storage fleet; unit order is significant (deterministic tie-breaks)."""

    units: tuple[StorageUnit, ...] = ()

    def __len__(self) -> int:
        return len(self.units)

    def __iter__(self):
        return iter(self.units)

    def energies(self) -> np.ndarray:
        return np.array([u.e_gwh for u in self.units], dtype=np.float64)

    def with_energies(self, e_gwh: Iterable[float]) -> "FleetState":
        energies = list(e_gwh)
        if len(energies) != len(self.units):
            raise DimensionError("energy vector length != unit count")
        return FleetState(
            tuple(replace(u, e_gwh=e) for u, e in zip(self.units, energies))
        )

    def fully_charged(self) -> "FleetState":
        return FleetState(
            tuple(replace(u, e_gwh=u.e_max_gwh) for u in self.units)
        )


@dataclass(frozen=True)
class EventCategory:
    """A shortfall-event class: severity threshold, allowance, exceedance risk."""

    name: str
    ppns_threshold_gw: float
    allowed_per_year: int
    exceedance_prob: float

    def __post_init__(self) -> None:
        if self.ppns_threshold_gw < 0.0:
            raise ParameterError("ppns_threshold_gw must be >= 0")
        if self.allowed_per_year < 0 or int(self.allowed_per_year) != self.allowed_per_year:
            raise ParameterError("allowed_per_year must be a non-negative integer")
        if not (0.0 < self.exceedance_prob <= 1.0):
            raise ParameterError("exceedance_prob must be in (0, 1]")


def validate_categories(categories: Sequence[EventCategory]) -> None:
    """Reject duplicate names and non-increasing thresholds across a category list."""
    names = [c.name for c in categories]
    if len(set(names)) != len(names):
        raise ParameterError("category names must be unique")
    thresholds = sorted(c.ppns_threshold_gw for c in categories)
    for lo, hi in zip(thresholds, thresholds[1:]):
        if not hi > lo:
            raise ParameterError(
                "category thresholds must be strictly increasing once sorted"
            )


@dataclass(frozen=True)
class DispatchParams:
    """Cost shaping for the per-step dispatch program.

    ``alpha``/``beta`` price unserved demand, ``gamma``/``delta`` shape the
    stored-energy value; shedding must dominate storage value (alpha > gamma)
    and ``delta < gamma * p_max / e_max`` for every unit in the fleet so the
    marginal value of stored energy stays positive.
    """

    alpha: float = 100.0
    beta: float = 100.0
    gamma: float = 1.0
    delta: float = 0.225
    demand_floor_gw: float = 1e-3

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "delta", "demand_floor_gw"):
            if not getattr(self, name) > 0.0:
                raise ParameterError(f"{name} must be positive")
        if not self.alpha > self.gamma:
            raise ParameterError("alpha must exceed gamma")

    def check_fleet(self, fleet: FleetState) -> None:
        for i, u in enumerate(fleet):
            bound = self.gamma * u.p_max_gw / u.e_max_gwh
            if not self.delta < bound:
                raise ParameterError(
                    f"delta={self.delta} must be < gamma*p_max/e_max={bound} "
                    f"for unit {i}"
                )


def auto_delta(gamma: float, fleet_or_duration: FleetState | float) -> float:
    """Default value-slope: 90% of the tightest admissible bound."""
    if isinstance(fleet_or_duration, FleetState):
        units = fleet_or_duration.units
        if not units:
            return 0.9 * gamma
        ratio = min(u.p_max_gw / u.e_max_gwh for u in units)
    else:
        duration = float(fleet_or_duration)
        if duration <= 0.0:
            raise ParameterError("duration_hours must be positive")
        ratio = 1.0 / duration
    return 0.9 * gamma * ratio


# ---------------------------------------------------------------------------
# operations


def net_shortfall(demand: TimeSeries, supplies: Sequence[TimeSeries]) -> TimeSeries:
    """Demand minus the sum of all supply traces; negative values are surplus."""
    out = demand.values.copy()
    for g in supplies:
        if len(g) != len(demand) or abs(g.dt_hours - demand.dt_hours) > 1e-12:
            raise DimensionError(
                f"supply trace (K={len(g)}, dt={g.dt_hours}) does not align with "
                f"demand (K={len(demand)}, dt={demand.dt_hours})"
            )
        out -= g.values
    return TimeSeries(out, demand.dt_hours)


def apply_step_dynamics(
    unit: StorageUnit, p_gw: float, dt_hours: float
) -> StorageUnit:
    """Advance one unit by one step at external power ``p_gw`` (+ = discharge).

    Charging books the round-trip loss: a charge draw of ``|p|`` stores only
    ``eta * |p| * dt``. The caller is expected to have clamped the request;
    results outside [0, e_max] beyond tolerance raise.
    """
    if abs(p_gw) > unit.p_max_gw + ENERGY_TOL:
        raise InfeasibleStepError(
            f"|p|={abs(p_gw)} exceeds rating {unit.p_max_gw}"
        )
    if p_gw >= 0.0:
        e_next = unit.e_gwh - p_gw * dt_hours
    else:
        e_next = unit.e_gwh - unit.eta * p_gw * dt_hours
    if e_next < -ENERGY_TOL or e_next > unit.e_max_gwh + ENERGY_TOL:
        raise InfeasibleStepError(
            f"energy update {unit.e_gwh} -> {e_next} leaves [0, {unit.e_max_gwh}]"
        )
    return replace(unit, e_gwh=min(max(e_next, 0.0), unit.e_max_gwh))


def time_to_go(unit: StorageUnit) -> float:
    """Hours the unit can sustain discharge at full rating."""
    return unit.e_gwh / unit.p_max_gw
