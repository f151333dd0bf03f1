"""Storage dispatch: QP policy, greedy single-node policy, year simulation."""

from ._select import COMPILED, kernel_name
from .policy import (
    FLOW_REG,
    DispatchLog,
    DispatchOutcome,
    QpInstance,
    QpSolution,
    build_qp,
    dispatch_step,
    greedy_single_node,
    kkt_residual,
    simulate_year,
    simulate_year_final_state,
    solve_qp,
)

__all__ = [
    "COMPILED",
    "kernel_name",
    "FLOW_REG",
    "DispatchLog",
    "DispatchOutcome",
    "QpInstance",
    "QpSolution",
    "build_qp",
    "dispatch_step",
    "greedy_single_node",
    "kkt_residual",
    "simulate_year",
    "simulate_year_final_state",
    "solve_qp",
]
