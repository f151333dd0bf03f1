"""Foresight-free storage dispatch over a capacitated flow network.

Each time step solves a small strictly convex QP trading off unserved
demand against the value of stored energy; the value slope is chosen so
that, absent binding constraints, the optimum equalises post-step
time-to-go across units, which reproduces the greedy single-node policy
(descending time-to-go discharge, ascending recharge) in aggregate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import (
    DimensionError,
    DispatchParams,
    FleetState,
    InternalConsistencyError,
    NetworkModel,
    ParameterError,
    SolverError,
    StorageUnit,
    TimeSeries,
    apply_step_dynamics,
    time_to_go,
)
from . import _pykernel
from ._select import kernel_run_year

#: quadratic tie-break weight on flows; makes the per-step optimum unique
#: without perturbing it beyond solver tolerances
FLOW_REG = 1e-6

_STATUS_NAMES = {
    _pykernel.OK: "optimal",
    _pykernel.ITER_LIMIT: "iteration limit exceeded",
    _pykernel.FACTOR_FAIL: "working-set factorisation failed",
    _pykernel.STATE_FAIL: "post-solve state update infeasible",
}


@dataclass(frozen=True)
class QpInstance:
    """One per-step dispatch program in structured form.

    Decision variables: per-node unserved demand ``s`` (>= 0), per-unit
    power ``p`` (box from rating and energy bounds at unity efficiency),
    per-edge flow ``f`` (|f| <= capacity, positive from ``edge_a`` to
    ``edge_b``). Objective is diagonal quadratic plus linear.
    """

    n_nodes: int
    shortfall_gw: np.ndarray
    s_quad: np.ndarray
    s_lin: np.ndarray
    unit_node: np.ndarray
    p_quad: np.ndarray
    p_lin: np.ndarray
    p_lo: np.ndarray
    p_hi: np.ndarray
    edge_a: np.ndarray
    edge_b: np.ndarray
    f_quad: np.ndarray
    f_cap: np.ndarray

    @property
    def n_units(self) -> int:
        return int(self.unit_node.size)

    @property
    def n_edges(self) -> int:
        return int(self.edge_a.size)

    @property
    def var_count(self) -> int:
        return self.n_nodes + self.n_units + self.n_edges

    def objective(self, s, p, f) -> float:
        s = np.asarray(s, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        f = np.asarray(f, dtype=np.float64)
        return float(
            np.dot(self.s_quad, s * s)
            + np.dot(self.s_lin, s)
            + np.dot(self.p_quad, p * p)
            + np.dot(self.p_lin, p)
            + np.dot(self.f_quad, f * f)
        )

    def solver_arrays(self):
        """(S, h, g, lo, hi, rowv) in the layout the kernels consume."""
        n, U, E = self.n_nodes, self.n_units, self.n_edges
        nv = n + U + E
        h = [0.0] * nv
        g = [0.0] * nv
        lo = [0.0] * nv
        hi = [0.0] * nv
        for i in range(n):
            h[i] = 2.0 * float(self.s_quad[i])
            g[i] = float(self.s_lin[i])
            hi[i] = math.inf
        for u in range(U):
            j = n + u
            h[j] = 2.0 * float(self.p_quad[u])
            g[j] = float(self.p_lin[u])
            lo[j] = float(self.p_lo[u])
            hi[j] = float(self.p_hi[u])
        for e in range(E):
            j = n + U + e
            h[j] = 2.0 * float(self.f_quad[e])
            lo[j] = -float(self.f_cap[e])
            hi[j] = float(self.f_cap[e])
        rowv = [[0.0] * nv for _ in range(n)]
        for i in range(n):
            rowv[i][i] = 1.0
        for u in range(U):
            rowv[int(self.unit_node[u])][n + u] = 1.0
        for e in range(E):
            rowv[int(self.edge_b[e])][n + U + e] += 1.0
            rowv[int(self.edge_a[e])][n + U + e] -= 1.0
        return list(map(float, self.shortfall_gw)), h, g, lo, hi, rowv


@dataclass(frozen=True)
class QpSolution:
    s: np.ndarray
    p: np.ndarray
    f: np.ndarray
    mu: np.ndarray
    objective: float
    status: str
    kkt_residual: float
    iterations: int


@dataclass(frozen=True)
class DispatchOutcome:
    """One dispatched step: unserved demand, unit powers, flows, new state."""

    s_gw: np.ndarray
    unit_power_gw: np.ndarray
    edge_flow_gw: np.ndarray
    fleet_after: FleetState


@dataclass(frozen=True)
class DispatchLog:
    """Per-step dispatch detail collected when simulating verbosely."""

    unit_power_gw: np.ndarray  # (U, K)
    unit_energy_gwh: np.ndarray  # (U, K), post-step
    edge_flow_gw: np.ndarray  # (E, K)


def greedy_single_node(
    request_gw: float, units: Sequence[StorageUnit], dt_hours: float = 1.0
) -> list[float]:
    """Greedy time-to-go policy for co-located units.

    Positive requests discharge in descending time-to-go order at maximum
    feasible rate; negative requests recharge in ascending order. Ties
    break on unit index. The unmet remainder is implicit.
    """
    p = [0.0] * len(units)
    if request_gw > 0.0:
        order = sorted(range(len(units)), key=lambda u: (-time_to_go(units[u]), u))
        remaining = request_gw
        for u in order:
            if remaining <= 0.0:
                break
            unit = units[u]
            alloc = min(unit.p_max_gw, unit.e_gwh / dt_hours, remaining)
            p[u] = alloc
            remaining -= alloc
    elif request_gw < 0.0:
        order = sorted(range(len(units)), key=lambda u: (time_to_go(units[u]), u))
        remaining = -request_gw
        for u in order:
            if remaining <= 0.0:
                break
            unit = units[u]
            headroom = (unit.e_max_gwh - unit.e_gwh) / (unit.eta * dt_hours)
            alloc = min(unit.p_max_gw, headroom, remaining)
            p[u] = -alloc
            remaining -= alloc
    return p


def _fleet_arrays(fleet: FleetState, network: NetworkModel):
    unit_node = np.array(
        [network.node_index(u.node_id) for u in fleet], dtype=np.int32
    )
    p_max = np.array([u.p_max_gw for u in fleet], dtype=np.float64)
    e_max = np.array([u.e_max_gwh for u in fleet], dtype=np.float64)
    e0 = np.array([u.e_gwh for u in fleet], dtype=np.float64)
    eta = np.array([u.eta for u in fleet], dtype=np.float64)
    return unit_node, p_max, e_max, e0, eta


def build_qp(
    shortfalls_gw: Sequence[float],
    fleet: FleetState,
    network: NetworkModel,
    params: DispatchParams,
    demands_gw: Sequence[float],
    dt_hours: float = 1.0,
    flow_reg: float = FLOW_REG,
) -> QpInstance:
    """Compose the per-step dispatch QP for the given system state."""
    n = network.node_count
    S = np.asarray(shortfalls_gw, dtype=np.float64)
    D = np.asarray(demands_gw, dtype=np.float64)
    if S.shape != (n,) or D.shape != (n,):
        raise DimensionError("shortfalls/demands must supply one value per node")
    if not dt_hours > 0.0:
        raise ParameterError("dt_hours must be positive")
    params.check_fleet(fleet)
    unit_node, p_max, e_max, e0, _ = _fleet_arrays(fleet, network)
    edge_a, edge_b, cap = network.edge_arrays()

    dt = dt_hours
    d_eff = np.maximum(D, params.demand_floor_gw)
    s_quad = params.beta * dt / (2.0 * d_eff)
    s_lin = np.full(n, params.alpha * dt)
    p_quad = params.delta * dt * dt / (2.0 * p_max) if len(fleet) else np.zeros(0)
    p_lin = (params.gamma - params.delta * e0 / p_max) * dt if len(fleet) else np.zeros(0)
    # energy limits enter as power bounds at unity efficiency
    p_hi = np.minimum(p_max, e0 / dt) if len(fleet) else np.zeros(0)
    p_lo = np.maximum(-p_max, (e0 - e_max) / dt) if len(fleet) else np.zeros(0)
    f_quad = np.full(cap.size, flow_reg)
    return QpInstance(
        n_nodes=n,
        shortfall_gw=S,
        s_quad=s_quad,
        s_lin=s_lin,
        unit_node=unit_node,
        p_quad=p_quad,
        p_lin=p_lin,
        p_lo=p_lo,
        p_hi=p_hi,
        edge_a=edge_a,
        edge_b=edge_b,
        f_quad=f_quad,
        f_cap=cap,
    )


def kkt_residual(qp: QpInstance, s, p, f, mu) -> float:
    """Max relative KKT violation of a candidate solution with multipliers."""
    n, U, E = qp.n_nodes, qp.n_units, qp.n_edges
    s = np.asarray(s, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    scale = max(1.0, float(np.max(qp.s_lin)) if n else 1.0)

    worst = 0.0
    # balance rows: primal feasibility and complementarity
    inflow = np.zeros(n)
    for e in range(E):
        inflow[int(qp.edge_b[e])] += f[e]
        inflow[int(qp.edge_a[e])] -= f[e]
    p_at = np.zeros(n)
    for u in range(U):
        p_at[int(qp.unit_node[u])] += p[u]
    slack = s + p_at + inflow - qp.shortfall_gw
    worst = max(worst, float(np.max(-slack, initial=0.0)) / scale)
    worst = max(worst, float(np.max(-mu, initial=0.0)) / scale)
    if n:
        worst = max(worst, float(np.max(np.abs(mu * slack), initial=0.0)) / scale)

    # stationarity with bound multipliers eliminated by sign
    def bound_stat(grad, val, lo_b, hi_b):
        # grad must vanish in the interior, be >= 0 at lo, <= 0 at hi
        r = 0.0
        if val <= lo_b + 1e-9:
            r = max(r, -grad)
        elif val >= hi_b - 1e-9:
            r = max(r, grad)
        else:
            r = abs(grad)
        return r

    for i in range(n):
        grad = 2.0 * qp.s_quad[i] * s[i] + qp.s_lin[i] - mu[i]
        worst = max(worst, bound_stat(grad, s[i], 0.0, math.inf) / scale)
        worst = max(worst, max(0.0, -s[i]) / scale)
    for u in range(U):
        grad = 2.0 * qp.p_quad[u] * p[u] + qp.p_lin[u] - mu[int(qp.unit_node[u])]
        worst = max(worst, bound_stat(grad, p[u], qp.p_lo[u], qp.p_hi[u]) / scale)
        worst = max(worst, max(p[u] - qp.p_hi[u], qp.p_lo[u] - p[u], 0.0) / scale)
    for e in range(E):
        grad = (
            2.0 * qp.f_quad[e] * f[e]
            - mu[int(qp.edge_b[e])]
            + mu[int(qp.edge_a[e])]
        )
        worst = max(worst, bound_stat(grad, f[e], -qp.f_cap[e], qp.f_cap[e]) / scale)
        worst = max(worst, max(abs(f[e]) - qp.f_cap[e], 0.0) / scale)
    return worst


def solve_qp(qp: QpInstance, max_iter: int = 0) -> QpSolution:
    """Solve the convex per-step program to its unique optimum.

    Runs the reference active-set implementation; deterministic for
    identical input. Raises :class:`SolverError` with residual diagnostics
    if the iteration cap is hit.
    """
    n, U, E = qp.n_nodes, qp.n_units, qp.n_edges
    S, h, g, lo, hi, rowv = qp.solver_arrays()
    x, mu, status, iters = _pykernel.solve_structured(
        n, U, E, S, h, g, lo, hi, rowv, max_iter
    )
    s = np.array(x[:n])
    p = np.array(x[n : n + U])
    f = np.array(x[n + U :])
    np.maximum(s, 0.0, out=s)
    if U:
        np.clip(p, qp.p_lo, qp.p_hi, out=p)
    if E:
        np.clip(f, -qp.f_cap, qp.f_cap, out=f)
    residual = kkt_residual(qp, s, p, f, mu)
    if status != _pykernel.OK:
        raise SolverError(
            f"QP solve failed: {_STATUS_NAMES[status]} after {iters} iterations",
            diagnostics={"iterations": iters, "kkt_residual": residual},
        )
    return QpSolution(
        s=s,
        p=p,
        f=f,
        mu=np.asarray(mu),
        objective=qp.objective(s, p, f),
        status="optimal",
        kkt_residual=residual,
        iterations=iters,
    )


def _check_traces(traces: Sequence[TimeSeries], n: int, what: str):
    if len(traces) != n:
        raise DimensionError(f"{what}: expected {n} traces, got {len(traces)}")
    k = len(traces[0])
    dt = traces[0].dt_hours
    for t in traces[1:]:
        if len(t) != k or abs(t.dt_hours - dt) > 1e-12:
            raise DimensionError(f"{what}: traces are not aligned")
    return k, dt


def _run_kernel(shortfall, demand, fleet, network, params, dt, collect_logs):
    unit_node, p_max, e_max, e0, eta = _fleet_arrays(fleet, network)
    edge_a, edge_b, cap = network.edge_arrays()
    out = kernel_run_year(
        shortfall,
        demand,
        unit_node,
        p_max,
        e_max,
        e0,
        eta,
        edge_a,
        edge_b,
        cap,
        params.alpha,
        params.beta,
        params.gamma,
        params.delta,
        params.demand_floor_gw,
        dt,
        FLOW_REG,
        collect_logs,
    )
    resultant, e_final, p_log, f_log, e_log, status, step = out
    if status != _pykernel.OK:
        msg = f"{_STATUS_NAMES[status]} at step {step}"
        if status == _pykernel.STATE_FAIL:
            raise InternalConsistencyError(msg)
        raise SolverError(msg, diagnostics={"step": step})
    return resultant, e_final, p_log, f_log, e_log


def dispatch_step(
    shortfalls_gw: Sequence[float],
    fleet: FleetState,
    network: NetworkModel,
    params: DispatchParams,
    demands_gw: Sequence[float],
    dt_hours: float = 1.0,
) -> DispatchOutcome:
    """Solve one step and advance the fleet through the storage dynamics.

    Solution values are clamped to their bounds (tolerance 1e-9) before the
    energy update; charging books the per-unit round-trip loss.
    """
    n = network.node_count
    S = np.asarray(shortfalls_gw, dtype=np.float64).reshape(n, 1)
    D = np.asarray(demands_gw, dtype=np.float64).reshape(n, 1)
    params.check_fleet(fleet)
    resultant, e_final, p_log, f_log, _ = _run_kernel(
        S, D, fleet, network, params, dt_hours, True
    )
    fleet_after = FleetState(
        tuple(
            apply_step_dynamics(u, float(p_log[i, 0]), dt_hours)
            for i, u in enumerate(fleet)
        )
    )
    # the kernel already enforced the same bounds; cross-check
    for u, (unit, after) in enumerate(zip(fleet, fleet_after)):
        if abs(after.e_gwh - e_final[u]) > 1e-9:
            raise InternalConsistencyError(
                f"unit {u}: dynamics disagree with kernel energy update"
            )
    return DispatchOutcome(
        s_gw=resultant[:, 0].copy(),
        unit_power_gw=p_log[:, 0].copy(),
        edge_flow_gw=f_log[:, 0].copy(),
        fleet_after=fleet_after,
    )


def simulate_year(
    shortfall_traces: Sequence[TimeSeries],
    fleet: FleetState,
    network: NetworkModel,
    params: DispatchParams,
    demands: Sequence[TimeSeries],
    verbose: bool = False,
) -> tuple[list[TimeSeries], DispatchLog | None]:
    """Dispatch the fleet step-by-step over a year of shortfall traces.

    Returns the per-node resultant traces (unserved demand after storage
    and flows) and, when ``verbose``, the per-step dispatch log.
    """
    n = network.node_count
    k, dt = _check_traces(shortfall_traces, n, "shortfall_traces")
    kd, dtd = _check_traces(demands, n, "demands")
    if kd != k or abs(dtd - dt) > 1e-12:
        raise DimensionError("demand traces do not align with shortfall traces")
    params.check_fleet(fleet)
    S = np.stack([t.values for t in shortfall_traces])
    D = np.stack([t.values for t in demands])
    resultant, e_final, p_log, f_log, e_log = _run_kernel(
        S, D, fleet, network, params, dt, verbose
    )
    out = [TimeSeries(resultant[i], dt) for i in range(n)]
    log = None
    if verbose:
        log = DispatchLog(
            unit_power_gw=p_log, unit_energy_gwh=e_log, edge_flow_gw=f_log
        )
    return out, log


def simulate_year_final_state(
    shortfall_traces: Sequence[TimeSeries],
    fleet: FleetState,
    network: NetworkModel,
    params: DispatchParams,
    demands: Sequence[TimeSeries],
) -> tuple[list[TimeSeries], FleetState]:
    """Like :func:`simulate_year` but also returns the end-of-year fleet."""
    n = network.node_count
    k, dt = _check_traces(shortfall_traces, n, "shortfall_traces")
    params.check_fleet(fleet)
    S = np.stack([t.values for t in shortfall_traces])
    D = np.stack([t.values for t in demands])
    resultant, e_final, *_ = _run_kernel(S, D, fleet, network, params, dt, False)
    out = [TimeSeries(resultant[i], dt) for i in range(n)]
    return out, fleet.with_energies(e_final)
