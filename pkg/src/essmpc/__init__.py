"""Swing-equation grid simulation with storage power / virtual-inertia MPC."""

from .grid import (BalanceReport, DisturbanceEvent, EquilibriumError,
                   GeneratorBus, GridError, GridModel, Line, LoadBus,
                   StorageBus, check_power_balance, line_susceptance,
                   network_injection, solve_equilibrium)
from .dynamics import (ConstraintReport, ControlInput, SimulationAbort,
                       SystemState, Trajectory, Violation, constant_policy,
                       euler_step, monitor_constraints, schedule_policy,
                       simulate, swing_jacobian, swing_rhs)
from .qp import (ConvexProgram, DualSet, QpError, QpWorkspace, SolveReport,
                 kkt_residual, solve_qp)
from .mpc import (HorizonProgram, LtvModel, MpcConfig, MpcConfigError,
                  MpcController, MpcStepResult, SqpSettings, StorageRegime,
                  assemble_horizon_program, linearize_dynamics,
                  mpc_solve_horizon, receding_horizon_run)
from .dmpc import (AdmmReport, AdmmSettings, AreaPartition, AreaProgram,
                   ConsensusState, CouplingEquality, DistributedMpcController,
                   PartitionError, area_subproblem_solve, build_coupling,
                   distributed_mpc_run, partition_grid, pdc_admm_step)
from .scenario import (Scenario, ScenarioError, bundled_scenario_path,
                       parse_scenario, scenario_text, write_scenario)

__version__ = "0.1.0"
