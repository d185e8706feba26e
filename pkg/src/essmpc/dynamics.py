"""Continuous-time bus dynamics, forward-Euler stepping, and monitoring.

State layout: one angle per bus, one frequency deviation per second-order
(generator or storage) bus, one cumulative-energy entry per storage bus.
Energy tracks the time integral of the storage injection, so charging
(negative power) drives it toward the lower allowance bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .grid import DisturbanceEvent, GeneratorBus, GridModel, LoadBus, StorageBus

__all__ = [
    "SystemState",
    "ControlInput",
    "Trajectory",
    "Violation",
    "ConstraintReport",
    "SimulationAbort",
    "swing_rhs",
    "swing_jacobian",
    "euler_step",
    "simulate",
    "monitor_constraints",
    "constant_policy",
    "schedule_policy",
]

# A storage power pushing outward is zeroed once the energy integral is this
# close to its bound (clamped mode only).
ENERGY_CLAMP_TOL = 1e-9


@dataclass
class SystemState:
    """Snapshot of the network at time t."""

    angles: np.ndarray    # rad, one per bus
    omega: np.ndarray     # rad/s deviation, one per inertia-bearing bus
    energy: np.ndarray    # p.u.*s, one per storage bus
    t: float = 0.0

    def copy(self) -> "SystemState":
        return SystemState(self.angles.copy(), self.omega.copy(),
                           self.energy.copy(), self.t)

    def validate(self, grid: GridModel) -> None:
        if self.angles.shape != (grid.n_buses,):
            raise ValueError(f"angles shape {self.angles.shape} mismatches grid")
        if self.omega.shape != (len(grid.inertia_buses),):
            raise ValueError(f"omega shape {self.omega.shape} mismatches grid")
        if self.energy.shape != (len(grid.storage_buses),):
            raise ValueError(f"energy shape {self.energy.shape} mismatches grid")


@dataclass
class ControlInput:
    """Storage set-points for one step: reference power and virtual inertia."""

    power: np.ndarray    # p.u., one per storage bus
    inertia: np.ndarray  # seconds, one per storage bus

    def copy(self) -> "ControlInput":
        return ControlInput(self.power.copy(), self.inertia.copy())

    def validate(self, grid: GridModel) -> None:
        n_s = len(grid.storage_buses)
        if self.power.shape != (n_s,) or self.inertia.shape != (n_s,):
            raise ValueError("control arrays mismatch the number of storage buses")
        for s, bus in enumerate(grid.storage_buses):
            role = grid.storage_role(bus)
            p_lo, p_hi = role.power_bounds
            if not p_lo - 1e-9 <= self.power[s] <= p_hi + 1e-9:
                raise ValueError(
                    f"storage power {self.power[s]} at bus {bus} outside "
                    f"[{p_lo}, {p_hi}]")
            m_lo, m_hi = role.inertia_bounds
            if not m_lo - 1e-9 <= self.inertia[s] <= m_hi + 1e-9:
                raise ValueError(
                    f"virtual inertia {self.inertia[s]} at bus {bus} outside "
                    f"[{m_lo}, {m_hi}]")


@dataclass
class Trajectory:
    """Uniformly spaced closed- or open-loop run: states and applied inputs."""

    states: list[SystemState]
    inputs: list[ControlInput]
    ts: float
    name: str = ""

    def __len__(self) -> int:
        return len(self.states)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def angle_matrix(self) -> np.ndarray:
        return np.array([s.angles for s in self.states])

    def omega_matrix(self) -> np.ndarray:
        return np.array([s.omega for s in self.states])

    def energy_matrix(self) -> np.ndarray:
        return np.array([s.energy for s in self.states])

    def power_matrix(self) -> np.ndarray:
        return np.array([u.power for u in self.inputs])

    def inertia_matrix(self) -> np.ndarray:
        return np.array([u.inertia for u in self.inputs])

    def frequency_integral(self) -> float:
        """Left Riemann sum of sum_i |omega_i| dt over the whole run."""
        w = self.omega_matrix()
        if len(w) <= 1:
            return 0.0
        return float(np.sum(np.abs(w[:-1])) * self.ts)


@dataclass(frozen=True)
class Violation:
    step: int
    t: float
    kind: str      # "frequency" | "power" | "energy"
    bus: int
    value: float
    limit: float


@dataclass
class ConstraintReport:
    """Every step/bus pair at which a frequency, power, or energy bound fails."""

    violations: list[Violation] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.violations)

    def by_kind(self, kind: str) -> list[Violation]:
        return [v for v in self.violations if v.kind == kind]

    def first_time(self, kind: str) -> Optional[float]:
        hits = self.by_kind(kind)
        return hits[0].t if hits else None


class SimulationAbort(RuntimeError):
    """Controller failure mid-run; carries the trajectory built so far."""

    def __init__(self, message: str, partial: Trajectory, step: int):
        super().__init__(message)
        self.partial = partial
        self.step = step


def swing_rhs(grid: GridModel, state: SystemState, u: ControlInput,
              t: Optional[float] = None,
              events: Sequence[DisturbanceEvent] = ()) -> SystemState:
    """Time derivative of the state under the structure-preserving model.

    Generator buses:  d_dot = w,  w_dot = (P0 - D w - outflow) / M
    Load buses:       d_dot = (P0 - outflow) / D
    Storage buses:    d_dot = w,  w_dot = (P0 + P_e - D_e w - outflow) / M_e,
                      E_dot = P_e
    """
    if t is None:
        t = state.t
    p = grid.injections_at(t, events)
    outflow = np.sum(grid.susceptance_matrix
                     * np.sin(state.angles[:, None] - state.angles[None, :]), axis=1)

    d_angles = np.zeros(grid.n_buses)
    d_omega = np.zeros(len(grid.inertia_buses))
    omega_of = {bus: w for bus, w in zip(grid.inertia_buses, state.omega)}

    storage_index = {bus: s for s, bus in enumerate(grid.storage_buses)}
    for k, bus in enumerate(grid.inertia_buses):
        role = grid.roles[bus]
        w = omega_of[bus]
        d_angles[bus] = w
        if isinstance(role, GeneratorBus):
            d_omega[k] = (p[bus] - role.damping * w - outflow[bus]) / role.inertia
        else:
            s = storage_index[bus]
            m_e = u.inertia[s]
            d_omega[k] = (p[bus] + u.power[s] - role.damping * w
                          - outflow[bus]) / m_e
    for bus in grid.load_buses:
        role = grid.roles[bus]
        d_angles[bus] = (p[bus] - outflow[bus]) / role.damping

    return SystemState(d_angles, d_omega, u.power.copy(), t)


def swing_jacobian(grid: GridModel, state: SystemState, u: ControlInput,
                   t: Optional[float] = None,
                   events: Sequence[DisturbanceEvent] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians of the continuous right-hand side.

    Returns (J_x, J_u) for the stacked state x = [angles, omega] and control
    u = [power, inertia].  The sin terms linearize through cos at the current
    angles; the 1/M_e factors contribute -(f/M_e^2) sensitivities to inertia.
    """
    if t is None:
        t = state.t
    n = grid.n_buses
    n_w = len(grid.inertia_buses)
    n_s = len(grid.storage_buses)
    p = grid.injections_at(t, events)

    diff = state.angles[:, None] - state.angles[None, :]
    w_mat = grid.susceptance_matrix * np.cos(diff)   # d outflow_i / d angle_j = -w_mat[i, j], j != i
    row_sum = np.sum(w_mat, axis=1)                  # d outflow_i / d angle_i
    outflow = np.sum(grid.susceptance_matrix * np.sin(diff), axis=1)

    nx = n + n_w
    nu = 2 * n_s
    j_x = np.zeros((nx, nx))
    j_u = np.zeros((nx, nu))
    omega_col = {bus: n + k for k, bus in enumerate(grid.inertia_buses)}
    storage_index = {bus: s for s, bus in enumerate(grid.storage_buses)}

    for k, bus in enumerate(grid.inertia_buses):
        j_x[bus, omega_col[bus]] = 1.0
        role = grid.roles[bus]
        w = state.omega[k]
        if isinstance(role, GeneratorBus):
            m, d = role.inertia, role.damping
            f_val = None
        else:
            s = storage_index[bus]
            m, d = u.inertia[s], role.damping
            f_val = p[bus] + u.power[s] - d * w - outflow[bus]
        row = n + k
        j_x[row, :n] = w_mat[bus] / m
        j_x[row, bus] = -row_sum[bus] / m
        j_x[row, omega_col[bus]] += -d / m
        if f_val is not None:
            s = storage_index[bus]
            j_u[row, s] = 1.0 / m
            j_u[row, n_s + s] = -f_val / (m * m)
    for bus in grid.load_buses:
        role = grid.roles[bus]
        j_x[bus, :n] = w_mat[bus] / role.damping
        j_x[bus, bus] = -row_sum[bus] / role.damping

    return j_x, j_u


def euler_step(grid: GridModel, state: SystemState, u: ControlInput, ts: float,
               events: Sequence[DisturbanceEvent] = ()) -> SystemState:
    """One explicit Euler step; the energy integral is updated exactly."""
    if ts <= 0.0:
        raise ValueError(f"step size must be > 0, got {ts}")
    deriv = swing_rhs(grid, state, u, state.t, events)
    return SystemState(
        angles=state.angles + ts * deriv.angles,
        omega=state.omega + ts * deriv.omega,
        energy=state.energy + ts * u.power,
        t=state.t + ts,
    )


def _clamp_power(grid: GridModel, state: SystemState, u: ControlInput) -> ControlInput:
    """Zero any storage power that keeps pushing energy past its bound."""
    power = u.power.copy()
    for s, bus in enumerate(grid.storage_buses):
        e_lo, e_hi = grid.storage_role(bus).energy_bounds
        if power[s] < 0.0 and state.energy[s] <= e_lo + ENERGY_CLAMP_TOL:
            power[s] = 0.0
        elif power[s] > 0.0 and state.energy[s] >= e_hi - ENERGY_CLAMP_TOL:
            power[s] = 0.0
    return ControlInput(power, u.inertia.copy())


def simulate(grid: GridModel, initial: SystemState,
             controller: Callable[[int, SystemState], ControlInput],
             t_total: float, ts: float,
             events: Sequence[DisturbanceEvent] = (),
             clamp_storage_power_at_energy_limit: bool = True,
             name: str = "") -> Trajectory:
    """Run floor(t_total/ts) Euler steps under the given control policy.

    The controller is invoked once per step with the step index and current
    state.  With clamping enabled (the default), a storage that has exhausted
    its energy allowance stops charging or discharging, which breaks the
    power balance exactly as a saturated device would.
    """
    initial.validate(grid)
    n_steps = int(np.floor(t_total / ts + 1e-9)) if t_total > 0 else 0
    states = [initial.copy()]
    inputs: list[ControlInput] = []
    state = states[0]
    for k in range(n_steps):
        try:
            u = controller(k, state)
            u.validate(grid)
        except Exception as exc:
            paired = inputs + [inputs[-1].copy()] if inputs else []
            partial = Trajectory(states, paired, ts, name)
            raise SimulationAbort(
                f"controller failed at step {k} (t={state.t:.6g}): {exc}",
                partial, k) from exc
        if clamp_storage_power_at_energy_limit:
            u = _clamp_power(grid, state, u)
        state = euler_step(grid, state, u, ts, events)
        state.t = (k + 1) * ts + initial.t
        inputs.append(u)
        states.append(state)
    # Pair the final state with the last applied input for uniform export; a
    # zero-step run pairs the initial state with the controller's first input.
    if inputs:
        inputs = inputs + [inputs[-1].copy()]
    else:
        u0 = controller(0, state)
        u0.validate(grid)
        inputs = [u0]
    return Trajectory(states, inputs, ts, name)


def monitor_constraints(grid: GridModel, traj: Trajectory,
                        omega_limits: Optional[dict[int, float]] = None) -> ConstraintReport:
    """List every frequency/power violation and energy saturation.

    Touching an energy bound (within the clamp tolerance) counts as
    saturation: a clamped storage sits exactly on its bound, and that is the
    condition worth reporting.
    """
    report = ConstraintReport()
    omega_limits = omega_limits or {}
    inertia_pos = {bus: k for k, bus in enumerate(grid.inertia_buses)}
    for step, state in enumerate(traj.states):
        for bus, limit in omega_limits.items():
            if bus in inertia_pos:
                w = float(state.omega[inertia_pos[bus]])
                if abs(w) > limit:
                    report.violations.append(
                        Violation(step, state.t, "frequency", bus, w, limit))
        for s, bus in enumerate(grid.storage_buses):
            role = grid.storage_role(bus)
            e = float(state.energy[s])
            e_lo, e_hi = role.energy_bounds
            if e <= e_lo + ENERGY_CLAMP_TOL or e >= e_hi - ENERGY_CLAMP_TOL:
                report.violations.append(
                    Violation(step, state.t, "energy", bus, e,
                              e_lo if e - e_lo <= e_hi - e else e_hi))
            if step < len(traj.inputs):
                p = float(traj.inputs[step].power[s])
                p_lo, p_hi = role.power_bounds
                if p < p_lo - 1e-9 or p > p_hi + 1e-9:
                    report.violations.append(
                        Violation(step, state.t, "power", bus, p,
                                  p_lo if p < p_lo else p_hi))
    return report


def constant_policy(u: ControlInput) -> Callable[[int, SystemState], ControlInput]:
    """Controller that applies the same input at every step."""
    def policy(_step: int, _state: SystemState) -> ControlInput:
        return u.copy()
    return policy


def schedule_policy(times: Sequence[float], inputs: Sequence[ControlInput]
                    ) -> Callable[[int, SystemState], ControlInput]:
    """Piecewise-constant controller: at time t, the input with the largest
    schedule time <= t applies (the first entry before any schedule time)."""
    if len(times) != len(inputs) or not times:
        raise ValueError("schedule requires matching, non-empty times and inputs")
    order = np.argsort(times)
    times_sorted = [times[i] for i in order]
    inputs_sorted = [inputs[i] for i in order]

    def policy(_step: int, state: SystemState) -> ControlInput:
        chosen = inputs_sorted[0]
        for t_k, u_k in zip(times_sorted, inputs_sorted):
            if state.t >= t_k - 1e-12:
                chosen = u_k
            else:
                break
        return chosen.copy()
    return policy
