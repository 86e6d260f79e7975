"""Solver for the transformed time-optimal problem.

Outer loop: augmented Lagrangian over the terminal inequality constraint
in the shifted Bertsekas form

    L_A(nu, q; mu, rho) = j(nu, q) + (max(0, mu + rho*g)^2 - mu^2)/(2*rho),

with first-order multiplier updates mu <- max(0, mu + rho*g) and a
tenfold penalty increase whenever |g| stalls.

Inner loop: monolithic trust-region semismooth Newton over (nu, q).
Newton systems are solved matrix-free with Steihaug-CG in the product
inner product |dnu|^2 + |dq|^2_{L2(I x omega)}; bound-active control
coefficients are pinned (the semismooth treatment of the clamp) and a
projected-gradient step is the fallback when the model decrease test
fails. Each Hessian application costs two PDE solves.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import pde, reduced
from .controls import ControlFunction
from .reduced import ProblemData

__all__ = ["SolverOptions", "SolveReport", "AugLagState", "StagnationError",
           "DegenerateProblemError", "solve", "auglag_update", "inner_solve"]

logger = logging.getLogger("heatopt.optimizer")


class StagnationError(RuntimeError):
    """Trust region collapsed; carries solver diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateProblemError(RuntimeError):
    """nu was driven to the configured floor."""


@dataclass
class SolverOptions:
    tol_g: float = 1e-9
    tol_stat: float = 1e-8
    nu_min: float = 1e-6
    mu0: float = 0.0
    rho0: float = 10.0
    beta_rho: float = 10.0       # penalty growth on stall
    tau_dec: float = 0.25        # required |g| reduction per outer pass
    max_outer: int = 50
    max_newton: int = 60         # per inner solve
    cg_maxit: int = 400
    tr_init: float = 1.0
    tr_shrink: float = 0.25
    tr_grow: float = 2.0
    tr_accept: float = 0.1
    eps_bound: float = 1e-10
    self_check: bool = False     # FD-gate the mixed representer per solve


@dataclass
class AugLagState:
    mu: float
    rho: float
    nu: float
    q: ControlFunction
    g_prev: float | None = None
    history: list = field(default_factory=list)


@dataclass
class SolveReport:
    nu: float
    q: ControlFunction
    mu: float
    g_residual: float
    hamiltonian_residual: float
    projection_residual: float
    stationarity: float
    multiplier_identity_gap: float
    converged: bool
    outer_iterations: int
    newton_iterations: int
    pde_solves: int
    wall_time: float
    history: list
    tr_constants: dict = field(default_factory=dict)

    def as_rows(self):
        yield ("nu", self.nu)
        yield ("mu", self.mu)
        yield ("g_residual", self.g_residual)
        yield ("hamiltonian_residual", self.hamiltonian_residual)
        yield ("projection_residual", self.projection_residual)
        yield ("stationarity", self.stationarity)
        yield ("multiplier_identity_gap", self.multiplier_identity_gap)
        yield ("converged", int(self.converged))
        yield ("outer_iterations", self.outer_iterations)
        yield ("newton_iterations", self.newton_iterations)
        yield ("pde_solves", self.pde_solves)
        yield ("wall_time", self.wall_time)


class _Counter:
    __slots__ = ("pde", "newton")

    def __init__(self):
        self.pde = 0
        self.newton = 0


class _Point:
    """One (nu, q) iterate with cached state and unit-weight adjoint."""

    def __init__(self, pb: ProblemData, nu: float, q: ControlFunction,
                 counter: _Counter):
        self.pb = pb
        self.nu = nu
        self.q = q
        self.counter = counter
        self.loads = pb.space.loads(q)
        self.state = pde.solve_state(pb.ops, pb.grid, nu, self.loads, pb.u0_h)
        counter.pde += 1
        self.g = pb.G(self.state.terminal)
        self.qnorm_sq = pb.space.control_norm_sq(q)
        self.j = nu * (1.0 + 0.5 * pb.alpha * self.qnorm_sq)
        self._z1 = None

    @property
    def z1(self) -> np.ndarray:
        if self._z1 is None:
            self._z1 = pde.solve_adjoint(
                self.pb.ops, self.pb.grid, self.nu, 1.0,
                self.state.terminal, self.pb.ud_h).values
            self.counter.pde += 1
        return self._z1

    def LA(self, mu: float, rho: float) -> float:
        return self.j + (max(0.0, mu + rho * self.g) ** 2 - mu ** 2) / (2.0 * rho)

    def mu_eff(self, mu: float, rho: float) -> float:
        return max(0.0, mu + rho * self.g)

    def grad_g(self):
        """(d(nu)g, d(q)g representer); one adjoint solve, cached."""
        pb = self.pb
        dnu_g = reduced.hamiltonian_pairing(
            pb.ops, pb.grid, self.loads, self.state.values, self.z1)
        dq_g = pb.space.switching_gradient(self.q, 0.0, self.nu * self.z1)
        return dnu_g, dq_g

    def grad_LA(self, mu: float, rho: float):
        pb = self.pb
        me = self.mu_eff(mu, rho)
        dj_nu = 1.0 + 0.5 * pb.alpha * self.qnorm_sq
        if me == 0.0:
            zero_z = np.zeros((pb.grid.M, pb.ops.n_interior))
            dq = self.nu * pb.space.switching_gradient(self.q, pb.alpha, zero_z)
            return dj_nu, dq
        dnu = dj_nu + me * reduced.hamiltonian_pairing(
            pb.ops, pb.grid, self.loads, self.state.values, self.z1)
        dq = self.nu * pb.space.switching_gradient(
            self.q, pb.alpha, me * self.z1)
        return dnu, dq

    def stationarity(self, mu: float, rho: float):
        """|d(nu)L_A| + projection-formula residual of d(q)L_A."""
        dnu, dq = self.grad_LA(mu, rho)
        theta = 1.0 / (self.pb.alpha * self.nu)
        step = self.q.coeffs - theta * dq
        proj = self.pb.space.clip(step)
        resid_q = self.pb.space.norm(self.q.coeffs - proj)
        return abs(dnu) + resid_q, dnu, dq


def _active_mask(pb: ProblemData, q: ControlFunction, grad_q, eps_b):
    """Coefficients pinned at a bound with an outward-pushing gradient."""
    if pb.bounds is None:
        return None
    qa, qb = pb.bounds
    if pb.space.kind == "variational":
        # pre-projection field: pin nodes whose surrounding cutoff is
        # fully active (their quadrature mask vanished)
        return pb.space.fully_clipped_mask(q)
    low = (q.coeffs <= qa + eps_b) & (grad_q > 0.0)
    up = (q.coeffs >= qb - eps_b) & (grad_q < 0.0)
    return low | up


def _restrict(arr, mask):
    if mask is None:
        return arr
    out = arr.copy()
    out[mask] = 0.0
    return out


class _HessianModel:
    """Matrix-free AL Hessian at one point and multiplier state."""

    def __init__(self, point: _Point, mu: float, rho: float, mask):
        pb = point.pb
        self.pb = pb
        self.point = point
        self.mask = mask
        self.me = point.mu_eff(mu, rho)
        self.rho_active = rho if (mu + rho * point.g) > 0.0 else 0.0
        adj = pde.Trajectory(pb.grid, self.me * point.z1) \
            if self.me != 0.0 else None
        self.r_mix, self.d2nu = reduced.hess_L_mixed_representer(
            pb, point.nu, point.q, self.me, state=point.state,
            adjoint=adj, loads=point.loads)
        point.counter.pde += 3 if self.me != 0.0 else 0
        if self.rho_active > 0.0:
            self.dg_nu, dg_q = point.grad_g()
            self.dg_q = _restrict(dg_q, mask)
        else:
            self.dg_nu, self.dg_q = 0.0, None
        self.r_mix_r = _restrict(self.r_mix, mask)

    def matvec(self, dnu: float, dq: np.ndarray):
        pb = self.pb
        point = self.point
        dq = _restrict(dq, self.mask)
        hq = reduced.hess_L_qq_apply(pb, point.nu, point.q, self.me, dq)
        point.counter.pde += 2 if self.me != 0.0 else 0
        out_nu = self.d2nu * dnu + pb.space.dot(self.r_mix_r, dq)
        out_q = dnu * self.r_mix_r + hq
        if self.rho_active > 0.0:
            s = self.dg_nu * dnu + pb.space.dot(self.dg_q, dq)
            out_nu += self.rho_active * s * self.dg_nu
            out_q = out_q + (self.rho_active * s) * self.dg_q
        return out_nu, _restrict(out_q, self.mask)


def _steihaug(model: _HessianModel, b_nu, b_q, delta, space, rtol, maxit):
    """Trust-region CG in the product inner product; returns the step and
    the predicted model decrease."""

    def ip(a_nu, a_q, c_nu, c_q):
        return a_nu * c_nu + space.dot(a_q, c_q)

    x_nu, x_q = 0.0, np.zeros_like(b_q)
    r_nu, r_q = b_nu, b_q.copy()
    p_nu, p_q = r_nu, r_q.copy()
    rr = ip(r_nu, r_q, r_nu, r_q)
    rr0 = rr
    if rr0 == 0.0:
        return x_nu, x_q, 0.0, 0
    mdec = 0.0
    for it in range(maxit):
        h_nu, h_q = model.matvec(p_nu, p_q)
        php = ip(p_nu, p_q, h_nu, h_q)
        xx = ip(x_nu, x_q, x_nu, x_q)
        xp = ip(x_nu, x_q, p_nu, p_q)
        pp = ip(p_nu, p_q, p_nu, p_q)
        if php <= 1e-16 * pp:
            # negative curvature: follow p to the boundary
            tau = _boundary_tau(xx, xp, pp, delta)
            x_nu += tau * p_nu
            x_q += tau * p_q
            mdec += tau * ip(r_nu, r_q, p_nu, p_q) - 0.5 * tau ** 2 * php
            return x_nu, x_q, mdec, it + 1
        alpha = rr / php
        if xx + 2.0 * alpha * xp + alpha ** 2 * pp > delta ** 2:
            tau = _boundary_tau(xx, xp, pp, delta)
            x_nu += tau * p_nu
            x_q += tau * p_q
            mdec += tau * ip(r_nu, r_q, p_nu, p_q) - 0.5 * tau ** 2 * php
            return x_nu, x_q, mdec, it + 1
        x_nu += alpha * p_nu
        x_q += alpha * p_q
        mdec += 0.5 * alpha * rr
        r_nu -= alpha * h_nu
        r_q -= alpha * h_q
        rr_new = ip(r_nu, r_q, r_nu, r_q)
        if np.sqrt(rr_new) <= rtol * np.sqrt(rr0):
            return x_nu, x_q, mdec, it + 1
        beta = rr_new / rr
        rr = rr_new
        p_nu = r_nu + beta * p_nu
        p_q = r_q + beta * p_q
    return x_nu, x_q, mdec, maxit


def _boundary_tau(xx, xp, pp, delta):
    disc = max(xp ** 2 + pp * (delta ** 2 - xx), 0.0)
    return (-xp + np.sqrt(disc)) / pp


def inner_solve(pb: ProblemData, mu: float, rho: float, nu: float,
                q: ControlFunction, tol: float, opts: SolverOptions,
                counter: _Counter):
    """Trust-region semismooth Newton on the augmented functional.

    Returns the final point and the reached stationarity residual.
    """
    point = _Point(pb, nu, q, counter)
    delta = opts.tr_init
    resid, gnu, gq = point.stationarity(mu, rho)
    iters = 0
    while resid > tol and iters < opts.max_newton:
        iters += 1
        counter.newton += 1
        if point.nu <= 10.0 * opts.nu_min and gnu > 0.0:
            raise DegenerateProblemError(
                f"nu = {point.nu:.3e} is at the configured floor"
            )
        mask = _active_mask(pb, point.q, gq, opts.eps_bound)
        model = _HessianModel(point, mu, rho, mask)
        rtol = min(0.1, np.sqrt(max(resid, 1e-16)))
        b_nu, b_q = -gnu, -_restrict(gq, mask)
        # keep trial nu well inside the positive half line
        delta_eff = min(delta, 0.7 * point.nu)
        step = _steihaug(model, b_nu, b_q, delta_eff, pb.space, rtol,
                         opts.cg_maxit)
        dnu, dq, mdec, _ = step
        took_pg = False
        if mdec <= 0.0:
            dnu, dq = _pg_direction(pb, point, gnu, gq, delta_eff)
            mdec = abs(gnu * (-dnu) + pb.space.dot(gq, -dq))
            took_pg = True
        trial_q = pb.space.from_coeffs(pb.space.clip(point.q.coeffs + dq))
        trial = _Point(pb, point.nu + dnu, trial_q, counter)
        la = point.LA(mu, rho)
        actual = la - trial.LA(mu, rho)
        ratio = actual / mdec if mdec > 0 else -1.0
        at_boundary = abs(
            np.sqrt(dnu ** 2 + pb.space.dot(dq, dq)) - delta_eff
        ) < 1e-8 * delta_eff
        if mdec <= 1e-10 * (1.0 + abs(la)):
            # predicted decrease below the roundoff floor of L_A: the
            # ratio test is meaningless; accept on residual decrease
            t_resid, t_gnu, t_gq = trial.stationarity(mu, rho)
            if t_resid < resid:
                point = trial
                resid, gnu, gq = t_resid, t_gnu, t_gq
                continue
            delta *= opts.tr_shrink
        elif ratio > opts.tr_accept:
            point = trial
            if pb.space.kind == "variational" and pb.bounds is not None:
                point = _resync_clipped(pb, point, mu, rho, counter)
            if ratio > 0.75 and at_boundary and not took_pg:
                delta *= opts.tr_grow
            resid, gnu, gq = point.stationarity(mu, rho)
        else:
            delta *= opts.tr_shrink
        if delta < 1e-14:
            raise StagnationError(
                "trust region collapsed",
                diagnostics={
                    "nu": point.nu, "residual": resid, "g": point.g,
                    "mu": mu, "rho": rho, "iterations": iters,
                },
            )
    return point, resid, iters


def _pg_direction(pb, point, gnu, gq, delta):
    """Projected-gradient fallback direction, trust-region scaled."""
    theta = 1.0 / (pb.alpha * point.nu)
    dq = pb.space.clip(point.q.coeffs - theta * gq) - point.q.coeffs
    dnu = -gnu
    norm = np.sqrt(dnu ** 2 + pb.space.dot(dq, dq))
    if norm > delta:
        dnu *= delta / norm
        dq = dq * (delta / norm)
    return dnu, dq


def _resync_clipped(pb, point, mu, rho, counter):
    """Re-anchor fully clipped pre-projection nodes to the projection
    formula; keeps the bounded variational iteration from pinning."""
    mask = pb.space.fully_clipped_mask(point.q)
    if not mask.any():
        return point
    me = point.mu_eff(mu, rho)
    target = -pb.space.bstar(me * point.z1) / pb.alpha
    coeffs = point.q.coeffs.copy()
    changed = mask & (np.abs(coeffs - target) > 1e-14)
    if not changed.any():
        return point
    coeffs[mask] = target[mask]
    newq = pb.space.from_coeffs(coeffs)
    return _Point(pb, point.nu, newq, counter)


def auglag_update(state: AugLagState, g_val: float,
                  opts: SolverOptions | None = None) -> AugLagState:
    """First-order multiplier update with stall-triggered penalty growth."""
    opts = opts or SolverOptions()
    mu_new = max(0.0, state.mu + state.rho * g_val)
    rho_new = state.rho
    if state.g_prev is not None and abs(g_val) > opts.tau_dec * abs(state.g_prev):
        rho_new = state.rho * opts.beta_rho
    return AugLagState(mu=mu_new, rho=rho_new, nu=state.nu, q=state.q,
                       g_prev=g_val, history=state.history)


def solve(pb: ProblemData, init=None, opts: SolverOptions | None = None) -> SolveReport:
    """Full augmented-Lagrangian solve of the transformed problem.

    ``init`` is an optional (nu0, q0) warm start; the default is nu0 = 1
    and q0 = 0 clamped to the bounds.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    if init is None:
        nu = 1.0
        q = pb.space.from_coeffs(
            pb.space.clip(np.zeros((pb.grid.M, pb.space.n_c))))
    else:
        nu, q = init
        q = pb.space.from_coeffs(pb.space.clip(q.coeffs))
    counter = _Counter()
    state = AugLagState(mu=opts.mu0, rho=opts.rho0, nu=nu, q=q)
    history = state.history
    point = None
    converged = False
    resid = np.inf
    for outer in range(1, opts.max_outer + 1):
        if state.g_prev is None:
            tol_inner = max(opts.tol_stat, 1e-3)
        else:
            tol_inner = max(opts.tol_stat, 0.1 * abs(state.g_prev))
        point, resid, inner_iters = inner_solve(
            pb, state.mu, state.rho, state.nu, state.q, tol_inner, opts,
            counter)
        g = point.g
        mu_eff = point.mu_eff(state.mu, state.rho)
        history.append({
            "outer": outer, "g": g, "mu": mu_eff, "rho": state.rho,
            "inner_iterations": inner_iters, "stationarity": resid,
        })
        logger.info(
            "outer=%d |g|=%.3e mu=%.6e rho=%.1e inner=%d resid=%.3e",
            outer, abs(g), mu_eff, state.rho, inner_iters, resid)
        state.nu, state.q = point.nu, point.q
        if abs(g) < opts.tol_g and resid <= opts.tol_stat:
            state.mu = mu_eff
            converged = True
            break
        state = auglag_update(state, g, opts)
    else:
        logger.warning("augmented Lagrangian did not converge in %d passes",
                       opts.max_outer)

    # final diagnostics at the returned multiplier
    dnu_g, dq_g = point.grad_g()
    dnu_j = 1.0 + 0.5 * pb.alpha * point.qnorm_sq
    ham = dnu_j + state.mu * dnu_g
    proj = _projection_residual(pb, point, state.mu)
    mult_gap = abs(state.mu - dnu_j / (-dnu_g)) / max(abs(state.mu), 1e-30) \
        if dnu_g < 0 else np.inf
    report = SolveReport(
        nu=point.nu, q=point.q, mu=state.mu,
        g_residual=point.g,
        hamiltonian_residual=abs(ham),
        projection_residual=proj,
        stationarity=resid,
        multiplier_identity_gap=mult_gap,
        converged=converged,
        outer_iterations=len(history),
        newton_iterations=counter.newton,
        pde_solves=counter.pde,
        wall_time=time.perf_counter() - t0,
        history=history,
        tr_constants={"shrink": opts.tr_shrink, "grow": opts.tr_grow,
                      "accept": opts.tr_accept, "init": opts.tr_init},
    )
    if converged and state.mu < 1e-8:
        logger.warning("converged with a vanishing multiplier mu=%.2e",
                       state.mu)
    return report


def _projection_residual(pb: ProblemData, point: _Point, mu: float) -> float:
    """|| q - P_ad(-B* z / alpha) || with z the weight-mu adjoint."""
    target = -pb.space.bstar(mu * point.z1) / pb.alpha
    if pb.space.kind == "variational" and pb.bounds is not None:
        return pb.space.clipped_field_distance(point.q.coeffs, target)
    proj = pb.space.clip(target)
    return pb.space.norm(point.q.coeffs - proj)
