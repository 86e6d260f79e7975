"""dG(0) space-time solves on the reference interval.

All solvers are per-step sparse LU solves with the factorization of
(M + nu*k*c*A) cached on the FemOperators (one factorization per nu on
uniform grids). Values use the right-continuous convention
u_m = u(t_m) on I_m = (t_{m-1}, t_m]; trajectories are (M, n_interior)
arrays.

Forward recursion   (state, tangents):
    (M + nu*k_m*c*A) U_m = M U_{m-1} + k_m * f_m,      U_0 given
Backward recursion  (adjoint, auxiliary adjoints):
    (M + nu*k_m*c*A) Z_m = M Z_{m+1} + nu*k_m * g_m,   terminal load given

where f_m / g_m are per-step load vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import FemOperators
from .mesh import TimeGrid

__all__ = [
    "Trajectory",
    "solve_state",
    "solve_linearized_state",
    "solve_second_linearized_state",
    "solve_adjoint",
    "solve_backward_with_source",
]


@dataclass
class Trajectory:
    """Interval values of one space-time field, (M, n_interior)."""

    grid: TimeGrid
    values: np.ndarray
    initial: np.ndarray | None = None

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]


def _check(ops: FemOperators, grid: TimeGrid, nu: float):
    if nu <= 0:
        raise ValueError(f"nu must be positive, got {nu}")
    if grid.M < 1:
        raise ValueError("empty time grid")


def _forward(ops, grid, nu, step_loads, u0, keep="all"):
    """Run the forward recursion; step_loads is None or (M, n)."""
    k = grid.k
    n = ops.n_interior
    u = np.zeros(n) if u0 is None else np.asarray(u0, dtype=float)
    out = np.empty((grid.M, n)) if keep == "all" else None
    uniform = grid.is_uniform
    solver = ops.step_solver(nu, k[0]) if uniform else None
    for m in range(grid.M):
        if not uniform:
            solver = ops.step_solver(nu, k[m])
        rhs = ops.M @ u
        if step_loads is not None:
            rhs = rhs + k[m] * step_loads[m]
        u = solver(rhs)
        if out is not None:
            out[m] = u
    if keep == "all":
        return Trajectory(grid=grid, values=out, initial=u0)
    return u


def _backward(ops, grid, nu, step_loads, terminal_load, keep="all"):
    """Run the backward recursion; terminal_load enters the m=M row."""
    k = grid.k
    n = ops.n_interior
    out = np.empty((grid.M, n)) if keep == "all" else None
    uniform = grid.is_uniform
    solver = ops.step_solver(nu, k[0]) if uniform else None
    z = None
    for m in range(grid.M - 1, -1, -1):
        if not uniform:
            solver = ops.step_solver(nu, k[m])
        if z is None:
            rhs = np.array(terminal_load, dtype=float)
        else:
            rhs = ops.M @ z
        if step_loads is not None:
            rhs = rhs + (nu * k[m]) * step_loads[m]
        z = solver(rhs)
        if out is not None:
            out[m] = z
    if keep == "all":
        return Trajectory(grid=grid, values=out)
    return z


def solve_state(ops: FemOperators, grid: TimeGrid, nu: float,
                loads: np.ndarray | None, u0: np.ndarray,
                keep: str = "all"):
    """Discrete state: U_m from M U_{m-1} + nu*k_m*(B q)_m, U_0 = Pi_h u0.

    ``loads`` are the per-slab control loads B q_m (time integrals are
    exact for piecewise-constant-in-time controls).
    """
    _check(ops, grid, nu)
    step = None if loads is None else nu * loads
    return _forward(ops, grid, nu, step, u0, keep=keep)


def solve_linearized_state(ops: FemOperators, grid: TimeGrid, nu: float,
                           base: Trajectory, base_loads: np.ndarray | None,
                           dnu: float, dloads: np.ndarray | None,
                           keep: str = "all"):
    """Discrete tangent: source dnu*(B q + Lap_h u) + nu*B dq, zero start."""
    _check(ops, grid, nu)
    if base.grid.M != grid.M:
        raise ValueError("base trajectory lives on a different grid")
    step = np.zeros((grid.M, ops.n_interior))
    if dnu != 0.0:
        step += dnu * (-ops.c_diff) * (ops.A @ base.values.T).T
        if base_loads is not None:
            step += dnu * base_loads
    if dloads is not None:
        step += nu * dloads
    return _forward(ops, grid, nu, step, None, keep=keep)


def solve_second_linearized_state(ops: FemOperators, grid: TimeGrid, nu: float,
                                  dnu1: float, dloads1, du1: Trajectory,
                                  dnu2: float, dloads2, du2: Trajectory,
                                  keep: str = "all"):
    """Second tangent with the symmetric source
    dnu1*(B dq2 + Lap_h du2) + dnu2*(B dq1 + Lap_h du1), zero start."""
    _check(ops, grid, nu)
    step = np.zeros((grid.M, ops.n_interior))
    if dnu1 != 0.0:
        step += dnu1 * (-ops.c_diff) * (ops.A @ du2.values.T).T
        if dloads2 is not None:
            step += dnu1 * dloads2
    if dnu2 != 0.0:
        step += dnu2 * (-ops.c_diff) * (ops.A @ du1.values.T).T
        if dloads1 is not None:
            step += dnu2 * dloads1
    return _forward(ops, grid, nu, step, None, keep=keep)


def solve_adjoint(ops: FemOperators, grid: TimeGrid, nu: float, mu: float,
                  u_terminal: np.ndarray, ud_h: np.ndarray,
                  keep: str = "all"):
    """Discrete adjoint: terminal load mu*M*(u(1) - u_d), no source."""
    _check(ops, grid, nu)
    if mu == 0.0:
        traj = Trajectory(grid=grid, values=np.zeros((grid.M, ops.n_interior)))
        return traj if keep == "all" else traj.terminal
    terminal = mu * (ops.M @ (u_terminal - ud_h))
    return _backward(ops, grid, nu, None, terminal, keep=keep)


def solve_backward_with_source(ops: FemOperators, grid: TimeGrid, nu: float,
                               source_loads: np.ndarray | None,
                               terminal_load: np.ndarray,
                               keep: str = "all"):
    """Generic backward solve: per-step source nu*k_m*g_m plus a terminal
    load on the m = M row; reduces to solve_adjoint for zero sources."""
    _check(ops, grid, nu)
    return _backward(ops, grid, nu, source_loads, terminal_load, keep=keep)
