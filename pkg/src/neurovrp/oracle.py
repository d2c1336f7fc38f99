"""Exact brute-force solver for tiny instances.

Depth-first search over mask-legal action sequences, so the optimum is
exact with respect to the same single-vehicle construction semantics the
policy operates under. Optional-node insertions are bounded per route to
keep the action space finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import (DEPOT, Solution, feasible_mask, init_state, is_terminal,
                  solution_cost, step)
from .instances import DistanceMatrix, Instance, build_distance_matrix


@dataclass
class OracleLimits:
    max_customers: int = 9
    max_optional: int = 3
    optional_per_route: int = 2


@dataclass
class OracleResult:
    optimal_cost: float
    optimal_solution: Solution
    nodes_expanded: int
    proven: bool


def brute_force(instance: Instance, limits: OracleLimits | None = None,
                dist: DistanceMatrix | None = None,
                prune: bool = True) -> OracleResult:
    """Exhaustive DFS over legal action sequences.

    With `prune` on, branches whose partial cost already meets the
    incumbent are cut; both settings return the same optimum.
    """
    limits = limits or OracleLimits()
    if instance.n_customers > limits.max_customers:
        raise ValueError(f"instance exceeds oracle limit of "
                         f"{limits.max_customers} customers")
    if instance.n_optional > limits.max_optional:
        raise ValueError(f"instance exceeds oracle limit of "
                         f"{limits.max_optional} optional nodes")
    dist = dist or build_distance_matrix(instance)
    d = dist.values
    n = instance.n_customers

    best_cost = np.inf
    best_actions: list[int] | None = None
    expanded = 0

    # stack entries: (state, partial_cost, customers_this_route,
    #                 optionals_this_route)
    stack = [(init_state(instance), 0.0, 0, 0)]
    while stack:
        state, cost, route_cust, route_opt = stack.pop()
        expanded += 1
        if is_terminal(state, instance):
            if cost < best_cost:
                best_cost = cost
                best_actions = state.actions
            continue
        if prune and cost >= best_cost:
            continue
        sel = feasible_mask(state, instance, dist).selectable
        for node in np.flatnonzero(sel):
            node = int(node)
            if node == DEPOT and route_cust == 0 and state.current != DEPOT:
                continue  # empty route: depot->optional->depot detours
            if node > n:
                if route_opt >= limits.optional_per_route:
                    continue
                nxt_opt, nxt_cust = route_opt + 1, route_cust
            elif node == DEPOT:
                nxt_opt, nxt_cust = 0, 0
            else:
                nxt_opt, nxt_cust = route_opt, route_cust + 1
            leg = float(d[state.current, node])
            if prune and cost + leg >= best_cost:
                continue
            stack.append((step(state, node, instance, dist, verify=False),
                          cost + leg, nxt_cust, nxt_opt))

    if best_actions is None:
        raise RuntimeError("no feasible solution found within oracle limits")
    sol = Solution(actions=best_actions,
                   cost=solution_cost(instance, best_actions, dist))
    return OracleResult(optimal_cost=sol.cost, optimal_solution=sol,
                        nodes_expanded=expanded, proven=True)


def gap(cost: float, reference: float) -> float:
    """Percent deviation from a reference; negative beats the reference."""
    if reference <= 0:
        raise ValueError("reference must be positive")
    return 100.0 * (cost - reference) / reference
