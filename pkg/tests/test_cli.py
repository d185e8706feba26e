"""Command-line surface and output files."""

import numpy as np
import pytest

from essmpc.cli import main
from essmpc.outputs import (emit_plot_data, parse_plot_data,
                            trajectory_columns, trajectory_to_csv)
from essmpc.dynamics import constant_policy, simulate
from essmpc.scenario import bundled_scenario_path


@pytest.fixture(scope="module")
def two_bus_path():
    return str(bundled_scenario_path("two_bus"))


def read_csv(path):
    lines = path.read_text().strip().split("\n")
    header = lines[0].split(",")
    data = np.array([[float(tok) for tok in ln.split(",")] for ln in lines[1:]])
    return header, data


class TestSimulateCommand:
    def test_energy_column_crosses_allowance_at_fifteen_seconds(
            self, two_bus_path, tmp_path):
        out = tmp_path / "run"
        code = main(["simulate", two_bus_path, "--regime=cc",
                     f"--out={out}", "--ttotal=16"])
        assert code == 0
        header, data = read_csv(out / "simulate_trajectory.csv")
        e_col = header.index("E_1")
        t_col = header.index("t")
        crossed = data[:, e_col] <= -45.0 + 1e-9
        assert crossed.any()
        assert data[np.argmax(crossed), t_col] == pytest.approx(15.0, abs=1e-9)
        # saturation shows up in the constraint report
        text = (out / "simulate_constraints.txt").read_text()
        assert "energy" in text

    def test_csv_is_deterministic(self, two_bus_path, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["simulate", two_bus_path, f"--out={out}",
                         "--ttotal=2"]) == 0
            outs.append((out / "simulate_trajectory.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_zero_duration_writes_initial_row(self, two_bus_path, tmp_path):
        out = tmp_path / "zero"
        code = main(["mpc", two_bus_path, f"--out={out}", "--ttotal=0"])
        assert code == 0
        header, data = read_csv(out / "mpc_trajectory.csv")
        assert data.shape[0] == 1
        assert data[0, 0] == 0.0


class TestExitCodes:
    def test_missing_file_is_io_error(self, tmp_path):
        assert main(["simulate", str(tmp_path / "nope.scn")]) == 4

    def test_invalid_scenario_is_validation_error(self, tmp_path):
        bad = tmp_path / "bad.scn"
        bad.write_text("schema_version: 1\nname: x\n")
        assert main(["simulate", str(bad)]) == 2

    def test_unparseable_document_is_validation_error(self, tmp_path):
        bad = tmp_path / "mangled.scn"
        bad.write_text("{::not yaml::")
        assert main(["simulate", str(bad)]) == 2


class TestPlotData:
    def test_three_column_selection(self, two_bus_scenario):
        sc = two_bus_scenario
        traj = simulate(sc.grid, sc.initial_state(),
                        constant_policy(sc.reference_controls()), 0.1,
                        sc.sim_step, sc.events)
        text = emit_plot_data(sc.grid, traj, ["t", "omega_0", "omega_1"])
        names, data = parse_plot_data(text)
        assert names == ["t", "omega_0", "omega_1"]
        assert data.shape == (11, 3)

    def test_inertia_columns_on_twelve_bus(self, twelve_bus_scenario):
        sc = twelve_bus_scenario
        traj = simulate(sc.grid, sc.initial_state(),
                        constant_policy(sc.reference_controls()), 0.04,
                        sc.sim_step, sc.events)
        cols = ["t"] + [c for c in trajectory_columns(sc.grid)
                        if c.startswith("M_e_")]
        assert len(cols) == 4
        text = emit_plot_data(sc.grid, traj, cols)
        names, data = parse_plot_data(text)
        assert names == cols and data.shape[1] == 4

    def test_round_trip_exact(self, two_bus_scenario):
        sc = two_bus_scenario
        traj = simulate(sc.grid, sc.initial_state(),
                        constant_policy(sc.reference_controls()), 0.05,
                        sc.sim_step, sc.events)
        cols = trajectory_columns(sc.grid)
        text = emit_plot_data(sc.grid, traj, cols)
        names, data = parse_plot_data(text)
        csv_text = trajectory_to_csv(sc.grid, traj)
        csv_rows = np.array([[float(tok) for tok in ln.split(",")]
                             for ln in csv_text.strip().split("\n")[1:]])
        assert names == cols
        assert np.array_equal(data, csv_rows)

    def test_unknown_column_lists_available(self, two_bus_scenario):
        sc = two_bus_scenario
        traj = simulate(sc.grid, sc.initial_state(),
                        constant_policy(sc.reference_controls()), 0.02,
                        sc.sim_step)
        with pytest.raises(KeyError, match="available"):
            emit_plot_data(sc.grid, traj, ["t", "volt_0"])

    def test_cli_plot_data_command(self, two_bus_path, tmp_path):
        out = tmp_path / "run"
        assert main(["simulate", two_bus_path, f"--out={out}",
                     "--ttotal=1"]) == 0
        target = tmp_path / "cols.dat"
        code = main(["plot-data", two_bus_path,
                     str(out / "simulate_trajectory.csv"),
                     "t", "omega_0", "omega_1", f"--out={target}"])
        assert code == 0
        names, data = parse_plot_data(target.read_text())
        assert names == ["t", "omega_0", "omega_1"]
        assert data.shape[0] == 101

    def test_cli_plot_data_unknown_column_exit_code(self, two_bus_path, tmp_path):
        out = tmp_path / "run2"
        assert main(["simulate", two_bus_path, f"--out={out}",
                     "--ttotal=1"]) == 0
        code = main(["plot-data", two_bus_path,
                     str(out / "simulate_trajectory.csv"), "nope"])
        assert code == 2
