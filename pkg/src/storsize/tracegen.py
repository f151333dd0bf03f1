"""Per-sample annual trace generation.

Builds nodal net-shortfall traces from historical profile files (wind,
solar, demand), scenario capacities, and 2-state Markov availability
models (thermal, hydro, interconnector circuits). Everything is
deterministic given a :class:`SampleDraw`, so samples can be produced in
parallel with no shared mutable state.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    HOURS_PER_YEAR,
    DataError,
    DimensionError,
    ParameterError,
    TimeSeries,
)

_MASK64 = 0xFFFFFFFFFFFFFFFF

#: profile classes draw one shared historical year per group across all nodes
PROFILE_GROUPS = {"wind-on": "wind", "wind-off": "wind", "solar": "solar"}
MARKOV_CLASSES = ("thermal", "hydro", "interconnector")


@dataclass(frozen=True)
class MarkovUnitModel:
    """2-state (up/down) availability chain for one generating unit.

    ``cycle_hours`` is the mean time between subsequent failure events, so
    the mean up-duration is ``availability * cycle_hours`` and the mean
    down-duration is ``(1 - availability) * cycle_hours``; the stationary
    up-probability then equals ``availability`` exactly.
    """

    capacity_gw: float
    availability: float
    cycle_hours: float
    dt_hours: float
    p_fail: float
    p_repair: float


def build_markov_unit(
    capacity_gw: float,
    availability: float,
    cycle_hours: float,
    dt_hours: float = 1.0,
) -> MarkovUnitModel:
    """Derive per-step transition probabilities from availability and cycle length."""
    if not capacity_gw > 0.0:
        raise ParameterError("capacity_gw must be positive")
    if not (0.0 < availability <= 1.0):
        raise ParameterError("availability must be in (0, 1]")
    if not cycle_hours > 0.0:
        raise ParameterError("cycle_hours must be positive")
    if not dt_hours > 0.0:
        raise ParameterError("dt_hours must be positive")
    if availability == 1.0:
        p_fail, p_repair = 0.0, 1.0
    else:
        p_fail = dt_hours / (availability * cycle_hours)
        p_repair = dt_hours / ((1.0 - availability) * cycle_hours)
        if p_fail > 1.0 or p_repair > 1.0:
            raise ParameterError(
                f"cycle_hours={cycle_hours} too short for dt={dt_hours} h at "
                f"availability={availability}: transition probabilities "
                f"({p_fail:.4g}, {p_repair:.4g}) leave [0, 1]"
            )
    return MarkovUnitModel(
        capacity_gw=capacity_gw,
        availability=availability,
        cycle_hours=cycle_hours,
        dt_hours=dt_hours,
        p_fail=p_fail,
        p_repair=p_repair,
    )


def sample_availability_trace(
    model: MarkovUnitModel, K: int, rng: np.random.Generator
) -> TimeSeries:
    """Sample a {0, capacity} trace of length K from the chain.

    The initial state is drawn from the stationary distribution; sojourn
    times are geometric, drawn in vectorised alternating batches.
    """
    if K < 1:
        raise ParameterError("K must be >= 1")
    pf, pr = model.p_fail, model.p_repair
    if pf == 0.0 and pr == 0.0:
        pi_up = model.availability
    elif pf == 0.0:
        pi_up = 1.0
    elif pr == 0.0:
        pi_up = 0.0
    else:
        pi_up = pr / (pf + pr)
    up_first = bool(rng.random() < pi_up)

    cap = model.capacity_gw
    if up_first and pf == 0.0:
        return TimeSeries(np.full(K, cap), model.dt_hours)
    if not up_first and pr == 0.0:
        return TimeSeries(np.zeros(K), model.dt_hours)

    mean_cycle_steps = 1.0 / pf + 1.0 / pr
    batch = max(int(K / mean_cycle_steps) + 8, 8)
    parts: list[np.ndarray] = []
    covered = 0
    while covered < K:
        ups = rng.geometric(pf, size=batch)
        downs = rng.geometric(pr, size=batch)
        # each block holds whole cycles, so every block starts in the same phase
        pair = np.empty(2 * batch, dtype=np.int64)
        if up_first:
            pair[0::2] = ups
            pair[1::2] = downs
        else:
            pair[0::2] = downs
            pair[1::2] = ups
        parts.append(pair)
        covered += int(pair.sum())
    lengths = np.concatenate(parts) if len(parts) > 1 else parts[0]
    run_values = np.empty(lengths.size, dtype=np.float64)
    if up_first:
        run_values[0::2] = cap
        run_values[1::2] = 0.0
    else:
        run_values[0::2] = 0.0
        run_values[1::2] = cap
    trace = np.repeat(run_values, lengths)[:K]
    return TimeSeries(trace, model.dt_hours)


def split_into_units(total_capacity_gw: float, unit_size_gw: float) -> list[float]:
    """Divide a nodal total into full-size units plus one remainder unit."""
    if total_capacity_gw < 0.0:
        raise ParameterError("total capacity must be >= 0")
    if not unit_size_gw > 0.0:
        raise ParameterError("unit_size_gw must be positive")
    n_full = int(math.floor(total_capacity_gw / unit_size_gw + 1e-12))
    units = [unit_size_gw] * n_full
    remainder = total_capacity_gw - n_full * unit_size_gw
    if remainder > 1e-9:
        units.append(remainder)
    return units


def scale_profile_to_capacity(
    profile: TimeSeries,
    installed_gw: float,
    mode: str = "per_unit",
    base_gw: float | None = None,
) -> TimeSeries:
    """Scale a capacity-factor (per-unit) or raw-GW profile to installed capacity."""
    if installed_gw < 0.0:
        raise ParameterError("installed_gw must be >= 0")
    if mode == "per_unit":
        v = profile.values
        if v.size and (v.min() < -1e-9 or v.max() > 1.0 + 1e-9):
            raise ParameterError("per-unit profile values must lie in [0, 1]")
        return TimeSeries(v * installed_gw, profile.dt_hours)
    if mode == "raw":
        if base_gw is None or base_gw == 0.0:
            raise ParameterError("raw mode requires a nonzero base_gw")
        return TimeSeries(profile.values * (installed_gw / base_gw), profile.dt_hours)
    raise ParameterError(f"unknown profile mode {mode!r}")


def scale_demand_to_peak(demand: TimeSeries, target_peak_gw: float) -> TimeSeries:
    """Rescale so the trace maximum equals the target peak exactly."""
    if len(demand) == 0:
        raise ParameterError("demand trace is empty")
    peak = float(demand.values.max())
    if peak <= 0.0:
        raise ParameterError("demand trace has no positive peak to scale")
    if target_peak_gw < 0.0:
        raise ParameterError("target peak must be >= 0")
    # divide first: the argmax maps to exactly 1.0 * target
    return TimeSeries((demand.values / peak) * target_peak_gw, demand.dt_hours)


def disaggregate_demand(
    national: TimeSeries, weights: Sequence[float]
) -> list[TimeSeries]:
    """Split a national trace into per-node traces proportional to weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or np.any(w < 0.0):
        raise ParameterError("weights must be non-negative and non-empty")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ParameterError(f"weights sum to {w.sum()!r}, expected 1")
    return [TimeSeries(national.values * wi, national.dt_hours) for wi in w]


# ---------------------------------------------------------------------------
# scenario assembly


@dataclass(frozen=True)
class TraceLibrary:
    """Locations and available historical years for profile/demand files."""

    trace_dir: Path
    wind_years: tuple[int, ...]
    solar_years: tuple[int, ...]
    demand_years: tuple[int, ...]

    def profile_path(self, class_name: str, node_id: int, year: int) -> Path:
        return Path(self.trace_dir) / f"{class_name}_{node_id}_{year}.csv"

    def demand_path(self, year: int) -> Path:
        return Path(self.trace_dir) / f"demand_national_{year}.csv"


@dataclass(frozen=True)
class GeneratorClassConfig:
    """One generator class: per-node installed capacity plus its trace recipe."""

    name: str
    capacities_gw: tuple[float, ...]
    kind: str  # "profile" or "markov"
    availability: float | None = None
    cycle_hours: float | None = None
    unit_size_gw: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("profile", "markov"):
            raise ParameterError(f"unknown generator kind {self.kind!r}")
        if any(c < 0.0 for c in self.capacities_gw):
            raise ParameterError(f"{self.name}: capacities must be >= 0")
        if self.kind == "markov":
            if self.availability is None or self.cycle_hours is None:
                raise ParameterError(
                    f"{self.name}: markov class needs availability and cycle_hours"
                )
            if not self.unit_size_gw > 0.0:
                raise ParameterError(f"{self.name}: unit_size_gw must be positive")
        if self.kind == "profile" and self.name not in PROFILE_GROUPS:
            raise ParameterError(
                f"{self.name}: profile classes must be one of {sorted(PROFILE_GROUPS)}"
            )


@dataclass(frozen=True)
class ScenarioYear:
    """Everything needed to compose samples for one study year."""

    year: int
    peak_demand_gw: float
    regional_weights: tuple[float, ...]
    node_ids: tuple[int, ...]
    classes: tuple[GeneratorClassConfig, ...]
    library: TraceLibrary
    dt_hours: float = 1.0

    @property
    def steps_per_year(self) -> int:
        k = HOURS_PER_YEAR / self.dt_hours
        if abs(k - round(k)) > 1e-9:
            raise ParameterError(f"dt_hours={self.dt_hours} does not tile 8760 h")
        return int(round(k))


@dataclass(frozen=True)
class SampleDraw:
    """Historical-year selections plus the seed driving all stochastic traces."""

    wind_year: int
    solar_year: int
    demand_year: int
    rng_seed: int


def _philox(seed: int, salt: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, salt & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def make_sample_draw(
    scenario: ScenarioYear, base_seed: int, sample_index: int
) -> SampleDraw:
    """Seed rule: per-sample seed = base_seed XOR sample_index (order-independent)."""
    seed = (base_seed ^ sample_index) & _MASK64
    rng = _philox(seed, scenario.year << 1)
    lib = scenario.library
    wind_year = int(lib.wind_years[rng.integers(len(lib.wind_years))])
    solar_year = int(lib.solar_years[rng.integers(len(lib.solar_years))])
    demand_year = int(lib.demand_years[rng.integers(len(lib.demand_years))])
    return SampleDraw(wind_year, solar_year, demand_year, seed)


# file cache: keyed on (path, size, mtime) so rewritten files are re-read
_TRACE_CACHE: dict[tuple[str, int, int], np.ndarray] = {}


def clear_trace_cache() -> None:
    _TRACE_CACHE.clear()


def read_trace_csv(path: Path | str, expected_k: int | None = None) -> np.ndarray:
    """Read a `hour,value` trace file; validates row count and hour indexing."""
    path = Path(path)
    try:
        st = os.stat(path)
    except OSError as exc:
        raise DataError(f"trace file not found: {path}") from exc
    key = (str(path), st.st_size, st.st_mtime_ns)
    cached = _TRACE_CACHE.get(key)
    if cached is None:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["hour", "value"]:
                raise DataError(f"{path}: expected header 'hour,value', got {header}")
            values = []
            for row_idx, row in enumerate(reader):
                if len(row) != 2:
                    raise DataError(f"{path}: malformed row {row_idx}")
                if int(row[0]) != row_idx:
                    raise DataError(
                        f"{path}: hour column must run 0..K-1, got {row[0]} at row {row_idx}"
                    )
                values.append(float(row[1]))
        cached = np.asarray(values, dtype=np.float64)
        if cached.size and not np.all(np.isfinite(cached)):
            raise DataError(f"{path}: values must be finite")
        cached.setflags(write=False)
        _TRACE_CACHE[key] = cached
    if expected_k is not None and cached.size != expected_k:
        raise DimensionError(
            f"{path}: expected {expected_k} rows, found {cached.size}"
        )
    return cached


def write_trace_csv(path: Path | str, values: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hour", "value"])
        for i, v in enumerate(values):
            writer.writerow([i, repr(float(v))])


def _markov_rng(scenario: ScenarioYear, draw: SampleDraw) -> np.random.Generator:
    return _philox(draw.rng_seed, (scenario.year << 1) | 1)


def compose_sample_with_demand(
    scenario: ScenarioYear, draw: SampleDraw
) -> tuple[list[TimeSeries], list[TimeSeries]]:
    """Compose (net-shortfall traces, demand traces), one of each per node."""
    K = scenario.steps_per_year
    dt = scenario.dt_hours
    n = len(scenario.node_ids)
    if len(scenario.regional_weights) != n:
        raise DimensionError("regional_weights length != node count")
    lib = scenario.library

    national = TimeSeries(
        read_trace_csv(lib.demand_path(draw.demand_year), expected_k=K), dt
    )
    if national.values.min() < -1e-9:
        raise DataError(f"{lib.demand_path(draw.demand_year)}: demand must be >= 0")
    scaled = scale_demand_to_peak(national, scenario.peak_demand_gw)
    demands = disaggregate_demand(scaled, scenario.regional_weights)

    rng = _markov_rng(scenario, draw)
    profile_year = {"wind": draw.wind_year, "solar": draw.solar_year}
    supply = [np.zeros(K) for _ in range(n)]
    for cls in scenario.classes:
        if len(cls.capacities_gw) != n:
            raise DimensionError(f"{cls.name}: capacities length != node count")
        if cls.kind == "profile":
            year = profile_year[PROFILE_GROUPS[cls.name]]
            for i, node_id in enumerate(scenario.node_ids):
                cap = cls.capacities_gw[i]
                if cap == 0.0:
                    continue
                raw = read_trace_csv(
                    lib.profile_path(cls.name, node_id, year), expected_k=K
                )
                if raw.size and (raw.min() < -1e-9 or raw.max() > 1.0 + 1e-9):
                    raise DataError(
                        f"{lib.profile_path(cls.name, node_id, year)}: "
                        "capacity factors must lie in [0, 1]"
                    )
                supply[i] = supply[i] + raw * cap
        else:
            # rng consumption order (class order, node order, unit order) is
            # part of the sampling contract: changing it changes samples
            for i in range(n):
                for unit_cap in split_into_units(
                    cls.capacities_gw[i], cls.unit_size_gw
                ):
                    model = build_markov_unit(
                        unit_cap, cls.availability, cls.cycle_hours, dt
                    )
                    supply[i] = supply[i] + sample_availability_trace(
                        model, K, rng
                    ).values

    shortfalls = [
        TimeSeries.annual(demands[i].values - supply[i], dt) for i in range(n)
    ]
    return shortfalls, demands


def compose_sample(scenario: ScenarioYear, draw: SampleDraw) -> list[TimeSeries]:
    """Net-shortfall trace per node for one Monte Carlo sample."""
    shortfalls, _ = compose_sample_with_demand(scenario, draw)
    return shortfalls
