"""Reduced objective, terminal constraint, and Lagrangian derivatives.

The transformed problem minimizes j(nu, q) = nu*(1 + alpha/2*|q|^2)
subject to g(nu, q) = G(u(1)) <= 0 on the reference interval, where u is
the dG(0)/P1 state. The Lagrangian is L = j + mu*g.

Everything here is an exact derivative of the fully discrete functional
(differentiate-the-discretization), so central finite differences match
the adjoint formulas to truncation order:

* d/dnu L    = 1 + alpha/2*|q|^2 + sum_m k_m <B q + Lap_h u, z>_m
* d/dq  L    = nu*(alpha*q + B* z)
* qq-Hessian application, the mixed (nu,q) representer via the
  nu-derivative of the adjoint, and the second nu-derivative via the
  second linearized state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controls import ControlFunction, ControlSpace
from .fem import FemOperators
from .mesh import TimeGrid
from . import pde

__all__ = ["ProblemData", "eval_j", "eval_g", "grad_L", "grad_g",
           "hess_L_qq_apply", "hess_L_mixed_representer", "quadratic_form_L",
           "hamiltonian_pairing", "multiplier_identity"]


@dataclass
class ProblemData:
    """Data of one transformed problem instance on one mesh level."""

    alpha: float
    delta0: float
    u0_h: np.ndarray
    ud_h: np.ndarray
    space: ControlSpace

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.delta0 <= 0:
            raise ValueError("delta0 must be positive")
        if self.G(self.u0_h) <= 0:
            raise ValueError(
                "G(u0) <= 0: the initial state already meets the target"
            )

    @property
    def ops(self) -> FemOperators:
        return self.space.ops

    @property
    def grid(self) -> TimeGrid:
        return self.space.grid

    @property
    def bounds(self):
        return self.space.bounds

    def G(self, u_terminal: np.ndarray) -> float:
        d = u_terminal - self.ud_h
        return 0.5 * self.ops.mass_dot(d, d) - 0.5 * self.delta0 ** 2


def solve_state_for(pb: ProblemData, nu: float, q: ControlFunction,
                    loads=None, keep="all"):
    if loads is None:
        loads = pb.space.loads(q)
    return pb.space, loads, pde.solve_state(pb.ops, pb.grid, nu, loads,
                                            pb.u0_h, keep=keep)


def eval_j(pb: ProblemData, nu: float, q: ControlFunction) -> float:
    if nu <= 0:
        raise ValueError("nu must be positive")
    return nu * (1.0 + 0.5 * pb.alpha * pb.space.control_norm_sq(q))


def eval_g(pb: ProblemData, nu: float, q: ControlFunction, loads=None,
           keep="all"):
    """Terminal constraint value and the state (or terminal state)."""
    if loads is None:
        loads = pb.space.loads(q)
    state = pde.solve_state(pb.ops, pb.grid, nu, loads, pb.u0_h, keep=keep)
    u_T = state.terminal if keep == "all" else state
    return pb.G(u_T), state


def hamiltonian_pairing(ops: FemOperators, grid: TimeGrid, loads,
                        U: np.ndarray, Z: np.ndarray) -> float:
    """sum_m k_m [ <B q, z>_m + (Lap_h u, z)_m ] with Lap_h = -c_diff*A."""
    k = grid.k
    au = (ops.A @ U.T).T
    vals = -ops.c_diff * np.einsum("mi,mi->m", au, Z)
    if loads is not None:
        vals = vals + np.einsum("mi,mi->m", loads, Z)
    return float(k @ vals)


def grad_L(pb: ProblemData, nu: float, q: ControlFunction, mu: float,
           state=None, adjoint=None, loads=None):
    """Gradient of L = j + mu*g: scalar d/dnu and the q representer.

    Reuses a solved state/adjoint when given (the adjoint must carry the
    terminal weight mu).
    """
    if loads is None:
        loads = pb.space.loads(q)
    if state is None:
        state = pde.solve_state(pb.ops, pb.grid, nu, loads, pb.u0_h)
    if adjoint is None:
        adjoint = pde.solve_adjoint(pb.ops, pb.grid, nu, mu,
                                    state.terminal, pb.ud_h)
    dnu = 1.0 + 0.5 * pb.alpha * pb.space.control_norm_sq(q) \
        + hamiltonian_pairing(pb.ops, pb.grid, loads, state.values,
                              adjoint.values)
    dq = nu * pb.space.switching_gradient(q, pb.alpha, adjoint.values)
    return dnu, dq


def grad_g(pb: ProblemData, nu: float, q: ControlFunction,
           state=None, loads=None):
    """Gradient of the constraint alone (mu = 1 adjoint)."""
    if loads is None:
        loads = pb.space.loads(q)
    if state is None:
        state = pde.solve_state(pb.ops, pb.grid, nu, loads, pb.u0_h)
    z1 = pde.solve_adjoint(pb.ops, pb.grid, nu, 1.0, state.terminal, pb.ud_h)
    dnu = hamiltonian_pairing(pb.ops, pb.grid, loads, state.values, z1.values)
    dq = pb.space.switching_gradient(q, 0.0, nu * z1.values)
    return dnu, dq, z1


def hess_L_qq_apply(pb: ProblemData, nu: float, q: ControlFunction,
                    mu: float, p: np.ndarray) -> np.ndarray:
    """q-block Hessian action: alpha*nu*p + nu*B*w.

    w solves the backward equation with terminal weight mu and terminal
    value du_p(1), the tangent in direction (0, p). Two PDE solves.
    """
    if mu == 0.0:
        zeros = np.zeros((pb.grid.M, pb.ops.n_interior))
        return pb.space.hessian_representer(q, p, pb.alpha * nu, zeros)
    dloads = pb.space.dloads(q, p)
    # tangent with dnu = 0 is a zero-start state solve; only u(1) needed
    du_T = pde.solve_state(pb.ops, pb.grid, nu, dloads,
                           np.zeros(pb.ops.n_interior), keep="terminal")
    w = pde.solve_backward_with_source(
        pb.ops, pb.grid, nu, None, mu * (pb.ops.M @ du_T))
    return pb.space.hessian_representer(q, p, pb.alpha * nu, nu * w.values)


def hess_L_mixed_representer(pb: ProblemData, nu: float, q: ControlFunction,
                             mu: float, state=None, adjoint=None, loads=None):
    """Mixed representer d(nu)d(q) L [1, .] and the scalar d2/dnu2 L.

    The representer is alpha*q + B*(z + nu*zeta) with zeta = dz/dnu, the
    backward solve with per-step source Lap_h z / nu and terminal weight
    mu*du_nu(1); d2/dnu2 L = mu*(|du_nu(1)|^2 + (u(1)-u_d, dduu(1))) with
    dduu the second tangent in the (1,0) direction. j is linear in nu, so
    it contributes nothing to d2/dnu2.
    """
    if loads is None:
        loads = pb.space.loads(q)
    if state is None:
        state = pde.solve_state(pb.ops, pb.grid, nu, loads, pb.u0_h)
    if mu == 0.0:
        r_mix = pb.space.switching_gradient(
            q, pb.alpha, np.zeros((pb.grid.M, pb.ops.n_interior)))
        return r_mix, 0.0
    if adjoint is None:
        adjoint = pde.solve_adjoint(pb.ops, pb.grid, nu, mu,
                                    state.terminal, pb.ud_h)
    du_nu = pde.solve_linearized_state(pb.ops, pb.grid, nu, state, loads,
                                       1.0, None)
    ddu_T = pde.solve_second_linearized_state(
        pb.ops, pb.grid, nu, 1.0, None, du_nu, 1.0, None, du_nu,
        keep="terminal")
    diff = state.terminal - pb.ud_h
    d2nu = mu * (pb.ops.mass_dot(du_nu.terminal, du_nu.terminal)
                 + pb.ops.mass_dot(diff, ddu_T))
    # zeta = dz/dnu: source loads k_m*(-c A Z_m), i.e. (Lap_h z)/nu under
    # the nu-scaled backward contract
    source = (-pb.ops.c_diff / nu) * (pb.ops.A @ adjoint.values.T).T
    zeta = pde.solve_backward_with_source(
        pb.ops, pb.grid, nu, source, mu * (pb.ops.M @ du_nu.terminal))
    r_mix = pb.space.switching_gradient(
        q, pb.alpha, adjoint.values + nu * zeta.values)
    return r_mix, d2nu


def quadratic_form_L(pb: ProblemData, nu: float, q: ControlFunction,
                     mu: float, dnu: float, p: np.ndarray,
                     state=None, loads=None) -> float:
    """Hessian quadratic form of L at direction (dnu, p).

    Assembled as alpha*nu*|p|^2 + 2*alpha*dnu*<q, p> +
    mu*(|du(1)|^2 + (u(1)-u_d, ddu(1))); one linearized and one second
    linearized forward solve.
    """
    if loads is None:
        loads = pb.space.loads(q)
    if state is None:
        state = pde.solve_state(pb.ops, pb.grid, nu, loads, pb.u0_h)
    space = pb.space
    jpart = pb.alpha * nu * space.masked_dot(q, p, p) \
        + 2.0 * pb.alpha * dnu * space.clamped_dot(q, p)
    if mu == 0.0:
        return jpart
    dloads = space.dloads(q, p)
    du = pde.solve_linearized_state(pb.ops, pb.grid, nu, state, loads,
                                    dnu, dloads)
    ddu_T = pde.solve_second_linearized_state(
        pb.ops, pb.grid, nu, dnu, dloads, du, dnu, dloads, du,
        keep="terminal")
    diff = state.terminal - pb.ud_h
    gpart = pb.ops.mass_dot(du.terminal, du.terminal) \
        + pb.ops.mass_dot(diff, ddu_T)
    return jpart + mu * gpart


def multiplier_identity(pb: ProblemData, nu: float, q: ControlFunction,
                        state=None, loads=None) -> float:
    """mu = d(nu)j / (-d(nu)g) at a stationary point."""
    if loads is None:
        loads = pb.space.loads(q)
    dnu_g, _, _ = grad_g(pb, nu, q, state=state, loads=loads)
    dnu_j = 1.0 + 0.5 * pb.alpha * pb.space.control_norm_sq(q)
    return dnu_j / (-dnu_g)
