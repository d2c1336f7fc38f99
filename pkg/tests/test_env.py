"""Tests for the construction environment, masks, and validator."""

import numpy as np
import pytest

from neurovrp import env as E
from neurovrp.env import DEPOT, Solution
from neurovrp.instances import (GenConfig, Instance, TimeWindows, Variant,
                                build_distance_matrix, generate)


def _line_instance(variant=Variant.VRP, demands=(3, 4), capacity=10, **kw):
    """Depot at origin, customers on the x axis at 0.1, 0.2, ..."""
    n = len(demands)
    customers = np.stack([0.1 * np.arange(1, n + 1), np.zeros(n)], axis=1)
    return Instance(variant=variant, depot=np.zeros(2), customers=customers,
                    demands=np.array(demands), capacity=capacity, **kw)


class TestMaskBasics:
    def test_initial_state(self):
        inst = _line_instance()
        s = E.init_state(inst)
        assert s.current == DEPOT
        assert not s.visited.any()
        assert s.actions == [DEPOT]

    def test_depot_not_selectable_at_depot(self):
        inst = _line_instance()
        d = build_distance_matrix(inst)
        sel = E.feasible_mask(E.init_state(inst), inst, d).selectable
        assert not sel[DEPOT]
        assert sel[1] and sel[2]

    def test_visited_customer_masked(self):
        inst = _line_instance()
        d = build_distance_matrix(inst)
        s = E.step(E.init_state(inst), 1, inst, d)
        sel = E.feasible_mask(s, inst, d).selectable
        assert not sel[1] and sel[2] and sel[DEPOT]

    def test_capacity_excludes_heavy_customer(self):
        inst = _line_instance(demands=(6, 5), capacity=10)
        d = build_distance_matrix(inst)
        s = E.step(E.init_state(inst), 1, inst, d)
        sel = E.feasible_mask(s, inst, d).selectable
        assert not sel[2]     # 6 + 5 > 10
        assert sel[DEPOT]

    def test_step_to_masked_node_raises(self):
        inst = _line_instance()
        with pytest.raises(ValueError):
            E.step(E.init_state(inst), DEPOT, inst,
                   build_distance_matrix(inst))

    def test_masked_property_is_complement(self):
        inst = _line_instance()
        m = E.feasible_mask(E.init_state(inst), inst,
                            build_distance_matrix(inst))
        assert (m.masked == ~m.selectable).all()


class TestResourceVariants:
    def test_evrpcs_lookahead_blocks_stranding(self):
        # customer 2 at distance 0.2; nearest facility to it is the depot
        inst = _line_instance(variant=Variant.EVRPCS, demands=(3, 4),
                              optional_nodes=np.array([[0.0, 0.9]]),
                              resource_max=0.35)
        d = build_distance_matrix(inst)
        sel = E.feasible_mask(E.init_state(inst), inst, d).selectable
        assert sel[1]          # 0.1 out + 0.1 back = 0.2 <= 0.35
        assert not sel[2]      # 0.2 out + 0.2 back = 0.4 > 0.35

    def test_evrpcs_station_resets_battery(self):
        inst = _line_instance(variant=Variant.EVRPCS,
                              optional_nodes=np.array([[0.05, 0.0]]),
                              resource_max=0.35)
        d = build_distance_matrix(inst)
        s = E.step(E.init_state(inst), 1, inst, d)
        assert np.isclose(s.resource, 0.25)
        s = E.step(s, 3, inst, d)              # station is node 3
        assert s.resource == inst.resource_max

    def test_vrprs_stop_resets_load_not_range(self):
        inst = _line_instance(variant=Variant.VRPRS, demands=(6, 6),
                              capacity=8,
                              optional_nodes=np.array([[0.15, 0.0]]),
                              resource_max=2.0)
        d = build_distance_matrix(inst)
        s = E.step(E.init_state(inst), 1, inst, d)
        assert s.load_used == 6
        r_before = s.resource
        s = E.step(s, 3, inst, d)
        assert s.load_used == 0
        assert s.resource < r_before   # range kept depleting

    def test_vrprs_optional_requires_escape_to_depot(self):
        # stop is reachable but the vehicle could not get home afterwards
        inst = _line_instance(variant=Variant.VRPRS,
                              optional_nodes=np.array([[0.3, 0.0]]),
                              resource_max=0.35)
        d = build_distance_matrix(inst)
        sel = E.feasible_mask(E.init_state(inst), inst, d).selectable
        assert not sel[3]      # 0.3 out + 0.3 home > 0.35

    def test_depot_resets_resource(self):
        inst = _line_instance(variant=Variant.EVRPCS,
                              optional_nodes=np.array([[0.9, 0.9]]),
                              resource_max=1.0)
        d = build_distance_matrix(inst)
        s = E.step(E.init_state(inst), 1, inst, d)
        s = E.step(s, DEPOT, inst, d)
        assert s.resource == 1.0 and s.load_used == 0


class TestTimeWindows:
    def _tw_instance(self, earliest, latest, service, horizon=4.6):
        n = len(earliest)
        tw = TimeWindows(np.array(earliest, dtype=float),
                         np.array(latest, dtype=float),
                         np.array(service, dtype=float), horizon)
        return _line_instance(variant=Variant.VRPTW,
                              demands=tuple([1] * n), time_windows=tw)

    def test_waiting_until_earliest(self):
        inst = self._tw_instance([0.5, 0.0], [1.0, 4.0], [0.1, 0.1])
        d = build_distance_matrix(inst)
        s = E.step(E.init_state(inst), 1, inst, d)
        assert np.isclose(s.time, 0.5)    # arrive 0.1, wait to e=0.5

    def test_late_arrival_masked(self):
        inst = self._tw_instance([0.0, 0.0], [4.0, 0.15], [0.5, 0.1])
        d = build_distance_matrix(inst)
        s = E.step(E.init_state(inst), 1, inst, d)
        sel = E.feasible_mask(s, inst, d).selectable
        # service 0.5 at customer 1, then travel 0.1 -> arrives after l=0.15
        assert not sel[2]

    def test_horizon_return_enforced(self):
        inst = self._tw_instance([0.0, 4.35], [4.0, 4.5], [0.1, 0.1])
        d = build_distance_matrix(inst)
        sel = E.feasible_mask(E.init_state(inst), inst, d).selectable
        # serving 2 from 4.35 + 0.1 service + 0.2 home > 4.6
        assert not sel[2]

    def test_depot_return_resets_clock(self):
        inst = self._tw_instance([0.0, 0.0], [4.0, 4.0], [0.1, 0.1])
        d = build_distance_matrix(inst)
        s = E.step(E.init_state(inst), 1, inst, d)
        s = E.step(s, DEPOT, inst, d)
        assert s.time == 0.0


class TestRolloutAndCost:
    def test_terminal_detection(self):
        inst = _line_instance()
        d = build_distance_matrix(inst)
        s = E.init_state(inst)
        for a in (1, 2, DEPOT):
            s = E.step(s, a, inst, d)
        assert E.is_terminal(s, inst)

    def test_solution_cost_directional(self):
        inst = generate(Variant.AVRP, 6, seed=0)
        d = build_distance_matrix(inst)
        acts = [0, 3, 1, 0, 2, 4, 5, 6, 0]
        cost = E.solution_cost(inst, acts, d)
        manual = sum(d.values[acts[i], acts[i + 1]]
                     for i in range(len(acts) - 1))
        assert np.isclose(cost, manual)

    def test_cost_requires_depot_endpoints(self):
        inst = _line_instance()
        d = build_distance_matrix(inst)
        with pytest.raises(ValueError):
            E.solution_cost(inst, [0, 1, 2], d)

    @pytest.mark.parametrize("variant", list(Variant))
    def test_random_rollouts_validate(self, variant):
        inst = generate(variant, 15, seed=8,
                        config=GenConfig(n_stations=3, n_stops=3))
        d = build_distance_matrix(inst)
        rng = np.random.default_rng(0)
        for _ in range(20):
            sol = E.random_rollout(inst, d, rng)
            assert E.validate_solution(inst, sol, d).ok

    def test_routes_split(self):
        sol = Solution(actions=[0, 2, 5, 0, 1, 0], cost=0.0)
        assert sol.routes() == [[2, 5], [1]]


class TestValidator:
    def _clean_solution(self, inst, seed=0):
        d = build_distance_matrix(inst)
        return E.random_rollout(inst, d, np.random.default_rng(seed)), d

    def test_detects_missing_customer(self):
        inst = generate(Variant.VRP, 8, seed=1)
        sol, d = self._clean_solution(inst)
        acts = [a for a in sol.actions if a != 3]
        bad = Solution(actions=acts, cost=E.solution_cost(inst, acts, d))
        families = {f for f, _ in E.validate_solution(inst, bad, d).violations}
        assert "visit-exactly-once" in families

    def test_detects_duplicate_visit(self):
        inst = generate(Variant.VRP, 8, seed=1)
        sol, d = self._clean_solution(inst)
        acts = sol.actions[:-1] + [sol.actions[1]] + [0]
        acts_cost = E.solution_cost(inst, acts, d)
        report = E.validate_solution(inst, Solution(acts, acts_cost), d)
        assert any(f == "visit-exactly-once" for f, _ in report.violations)

    def test_detects_capacity_violation(self):
        inst = _line_instance(demands=(6, 6), capacity=10)
        d = build_distance_matrix(inst)
        acts = [0, 1, 2, 0]
        report = E.validate_solution(
            inst, Solution(acts, E.solution_cost(inst, acts, d)), d)
        assert any(f == "capacity" for f, _ in report.violations)

    def test_detects_resource_violation(self):
        inst = _line_instance(variant=Variant.EVRPCS, demands=(1,),
                              optional_nodes=np.array([[0.9, 0.9]]),
                              resource_max=0.15)
        d = build_distance_matrix(inst)
        acts = [0, 1, 0]
        report = E.validate_solution(
            inst, Solution(acts, E.solution_cost(inst, acts, d)), d)
        assert any(f == "resource" for f, _ in report.violations)

    def test_detects_time_window_violation(self):
        tw = TimeWindows(np.array([0.0, 0.0]), np.array([4.0, 0.05]),
                         np.array([0.3, 0.1]), 4.6)
        inst = _line_instance(variant=Variant.VRPTW, demands=(1, 1),
                              time_windows=tw)
        d = build_distance_matrix(inst)
        acts = [0, 1, 2, 0]
        report = E.validate_solution(
            inst, Solution(acts, E.solution_cost(inst, acts, d)), d)
        assert any(f == "time-window" for f, _ in report.violations)

    def test_detects_cost_mismatch(self):
        inst = generate(Variant.VRP, 5, seed=2)
        sol, d = self._clean_solution(inst)
        report = E.validate_solution(
            inst, Solution(sol.actions, sol.cost + 0.5), d)
        assert any(f == "cost-mismatch" for f, _ in report.violations)

    def test_detects_immediate_repeat(self):
        inst = _line_instance()
        d = build_distance_matrix(inst)
        acts = [0, 1, 1, 2, 0]
        report = E.validate_solution(
            inst, Solution(acts, E.solution_cost(inst, acts, d)), d)
        assert any(f == "flow" for f, _ in report.violations)

    def test_clean_solutions_pass(self):
        for variant in Variant:
            inst = generate(variant, 10, seed=3,
                            config=GenConfig(n_stations=2, n_stops=2))
            sol, d = self._clean_solution(inst)
            assert E.validate_solution(inst, sol, d).ok
