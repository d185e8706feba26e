"""Network model: susceptance, flows, equilibrium, balance, validation."""

import math

import numpy as np
import pytest

from essmpc.grid import (BalanceReport, GeneratorBus, GridError, GridModel,
                         Line, LoadBus, StorageBus, check_power_balance,
                         line_susceptance, network_injection,
                         solve_equilibrium)


class TestLineSusceptance:
    def test_pure_line(self):
        assert line_susceptance(0.001, 10, 0) == pytest.approx(100.0)

    def test_transformer_only(self):
        assert line_susceptance(0.001, 0, 0.15) == pytest.approx(1.0 / 0.15)

    def test_line_plus_transformer(self):
        assert line_susceptance(0.001, 25, 0.15) == pytest.approx(1.0 / 0.175)

    def test_nonpositive_reactance_rejected(self):
        with pytest.raises(GridError):
            line_susceptance(0.0, 0.0, 0.0)
        with pytest.raises(GridError):
            line_susceptance(-0.001, 10, 0)


class TestNetworkInjection:
    def test_equal_angles_no_flow(self, two_bus_grid):
        assert network_injection(two_bus_grid, np.zeros(2), 0) == 0.0

    def test_two_bus_flow_value(self, two_bus_grid):
        flow = network_injection(two_bus_grid, np.array([0.06, 0.0]), 0)
        assert flow == pytest.approx(50.0 * math.sin(0.06), abs=1e-12)

    def test_total_injection_is_zero(self, three_bus_grid):
        rng = np.random.default_rng(7)
        for _ in range(20):
            angles = rng.uniform(-1.0, 1.0, size=3)
            total = sum(network_injection(three_bus_grid, angles, i)
                        for i in range(3))
            assert abs(total) < 1e-12

    def test_per_line_antisymmetry(self, three_bus_grid):
        angles = np.array([0.3, -0.1, 0.2])
        b = three_bus_grid.susceptance_matrix
        for ln in three_bus_grid.lines:
            f_ij = b[ln.from_bus, ln.to_bus] * math.sin(
                angles[ln.from_bus] - angles[ln.to_bus])
            f_ji = b[ln.to_bus, ln.from_bus] * math.sin(
                angles[ln.to_bus] - angles[ln.from_bus])
            assert f_ij == pytest.approx(-f_ji, abs=1e-15)


class TestEquilibrium:
    def test_two_bus_closed_form(self, two_bus_grid):
        angles = solve_equilibrium(two_bus_grid, np.array([-3.0]))
        assert angles[1] == 0.0
        assert angles[0] == pytest.approx(math.asin(0.06), abs=1e-10)

    def test_zero_injection_gives_flat_angles(self, three_bus_grid):
        grid = GridModel(three_bus_grid.roles, three_bus_grid.lines,
                         np.zeros(3), reference_bus=0)
        angles = solve_equilibrium(grid)
        assert np.max(np.abs(angles)) == 0.0

    def test_residual_bound_and_single_iteration_reconvergence(self, three_bus_grid):
        angles = solve_equilibrium(three_bus_grid, np.array([0.5]))
        p = three_bus_grid.net_injections(np.array([0.5]))
        for i in range(3):
            if i == three_bus_grid.reference_bus:
                continue
            resid = p[i] - network_injection(three_bus_grid, angles, i)
            assert abs(resid) < 1e-9

    def test_imbalance_rejected(self, two_bus_grid):
        with pytest.raises(GridError, match="balance"):
            solve_equilibrium(two_bus_grid, np.array([-2.0]))

    def test_twelve_bus_matches_published_initial_angles(self, twelve_bus_scenario):
        sc = twelve_bus_scenario
        angles = solve_equilibrium(sc.grid, sc.reference_power)
        published = np.array([-0.1931, -0.0452, -0.2552, -0.3340,
                              -0.1146, -0.3681, -0.4381, -0.4960,
                              0.0, -0.1750, -0.3150, -0.4150])
        assert np.max(np.abs(angles - published)) < 0.02


class TestPowerBalance:
    def test_twelve_bus_table(self, twelve_bus_scenario):
        report = check_power_balance(twelve_bus_scenario.grid,
                                     twelve_bus_scenario.reference_power)
        assert report.generation == pytest.approx(36.57, abs=1e-12)
        assert report.load == pytest.approx(36.57, abs=1e-12)
        assert abs(report.residual) < 1e-9
        assert report.balanced

    def test_empty_grid(self):
        grid = GridModel([], [], [])
        assert check_power_balance(grid) == BalanceReport(0.0, 0.0, 0.0, True)

    def test_two_bus_totals(self, two_bus_grid):
        report = check_power_balance(two_bus_grid, np.array([-3.0]))
        assert (report.generation, report.load) == (3.0, 3.0)
        assert report.residual == 0.0


class TestValidation:
    def test_negative_inertia_rejected(self):
        with pytest.raises(GridError, match="inertia"):
            GridModel([GeneratorBus(-3.0, 1.0), LoadBus(1.0)],
                      [Line(0, 1, 10.0)], [1.0, -1.0])

    def test_negative_damping_rejected(self):
        with pytest.raises(GridError, match="damping"):
            GridModel([GeneratorBus(3.0, -1.0), LoadBus(1.0)],
                      [Line(0, 1, 10.0)], [1.0, -1.0])

    def test_bound_order_rejected(self):
        bad = StorageBus(1.0, (5.0, 2.0), (-1.0, 1.0), (-10.0, 10.0), 0.0)
        with pytest.raises(GridError, match="inertia bounds"):
            GridModel([GeneratorBus(3.0, 1.0), bad], [Line(0, 1, 10.0)],
                      [1.0, -1.0])

    def test_initial_energy_outside_bounds_rejected(self):
        bad = StorageBus(1.0, (1.0, 5.0), (-1.0, 1.0), (-10.0, 10.0), 11.0)
        with pytest.raises(GridError, match="initial energy"):
            GridModel([GeneratorBus(3.0, 1.0), bad], [Line(0, 1, 10.0)],
                      [1.0, -1.0])

    def test_disconnected_graph_rejected(self):
        with pytest.raises(GridError, match="connected"):
            GridModel([GeneratorBus(3.0, 1.0), LoadBus(1.0), LoadBus(1.0)],
                      [Line(0, 1, 10.0)], [1.0, -0.5, -0.5])

    def test_duplicate_line_rejected(self):
        with pytest.raises(GridError, match="duplicate"):
            GridModel([GeneratorBus(3.0, 1.0), LoadBus(1.0)],
                      [Line(0, 1, 10.0), Line(1, 0, 5.0)], [1.0, -1.0])

    def test_self_loop_rejected(self):
        with pytest.raises(GridError, match="itself"):
            Line(0, 0, 10.0).validate()

    def test_nonpositive_susceptance_rejected(self):
        with pytest.raises(GridError, match="susceptance"):
            GridModel([GeneratorBus(3.0, 1.0), LoadBus(1.0)],
                      [Line(0, 1, -10.0)], [1.0, -1.0])
